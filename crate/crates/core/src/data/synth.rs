//! Synthetic relation corpora and task splitting.
//!
//! Each relation owns a pair of trigger tokens that sits between the two
//! entity mentions, plus an entity type for its head and tail. Noise replaces
//! individual trigger tokens with random content tokens.

use serde::{Deserialize, Serialize};

use super::instance::{group_by_relation, Instance, RelationId, Span, Task, TaskStream};
use super::vocab::{TokenId, Vocab, FIRST_CONTENT_ID, RESERVED};
use crate::error::{Error, Result};
use crate::numerics::Rng;

const ENTITY_TYPES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirstTaskConfig {
    pub relations: usize,
    pub shots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Total vocabulary size including the reserved block.
    pub vocab_size: usize,
    pub num_relations: usize,
    pub tasks: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub test_per_relation: usize,
    /// Overrides the shape of task 1 (large first task).
    #[serde(default)]
    pub first_task: Option<FirstTaskConfig>,
    pub noise: f64,
}

impl SynthConfig {
    pub fn first_task(&self) -> FirstTaskConfig {
        self.first_task.unwrap_or(FirstTaskConfig { relations: self.n_way, shots: self.k_shot })
    }

    pub fn relations_needed(&self) -> usize {
        self.first_task().relations + self.n_way * self.tasks.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.n_way == 0 || self.k_shot == 0 {
            return Err(Error::config("tasks, n_way and k_shot must all be positive"));
        }
        let first = self.first_task();
        if first.relations == 0 || first.shots == 0 {
            return Err(Error::config("first task needs at least one relation and one shot"));
        }
        if self.test_per_relation == 0 {
            return Err(Error::config("test_per_relation must be positive"));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::config(format!("noise {} outside [0, 1)", self.noise)));
        }
        if self.num_relations < self.relations_needed() {
            return Err(Error::config(format!(
                "num_relations {} < first-task relations + n_way x (tasks - 1) = {}",
                self.num_relations,
                self.relations_needed()
            )));
        }
        let pools = Pools::for_vocab(self.vocab_size)?;
        let pairs = pools.trigger.len() * (pools.trigger.len() - 1) / 2;
        if pairs < self.num_relations {
            return Err(Error::config(format!(
                "vocab_size {} yields only {pairs} trigger pairs for {} relations",
                self.vocab_size, self.num_relations
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Pools {
    trigger: Vec<TokenId>,
    entity: Vec<TokenId>,
    filler: Vec<TokenId>,
}

impl Pools {
    fn for_vocab(vocab_size: usize) -> Result<Pools> {
        let content = vocab_size.saturating_sub(RESERVED.len());
        let n_trig = content * 5 / 12;
        let n_ent = content / 3;
        let n_fill = content - n_trig - n_ent;
        if n_trig < 2 || n_ent < ENTITY_TYPES || n_fill < 1 {
            return Err(Error::config(format!(
                "vocab_size {vocab_size} leaves too few content tokens ({content})"
            )));
        }
        let ids: Vec<TokenId> = (0..content as TokenId).map(|i| FIRST_CONTENT_ID + i).collect();
        Ok(Pools {
            trigger: ids[..n_trig].to_vec(),
            entity: ids[n_trig..n_trig + n_ent].to_vec(),
            filler: ids[n_trig + n_ent..].to_vec(),
        })
    }

    fn vocab(&self) -> Vocab {
        let mut v = Vocab::new();
        for (i, _) in self.trigger.iter().enumerate() {
            v.insert(&format!("t{i:02}"));
        }
        for (i, _) in self.entity.iter().enumerate() {
            v.insert(&format!("e{i:02}"));
        }
        for (i, _) in self.filler.iter().enumerate() {
            v.insert(&format!("f{i:02}"));
        }
        v
    }

    fn entity_group(&self, ty: usize) -> &[TokenId] {
        let size = self.entity.len() / ENTITY_TYPES;
        &self.entity[ty * size..(ty + 1) * size]
    }

    fn content(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.trigger.iter().chain(&self.entity).chain(&self.filler).copied()
    }
}

/// The relation-to-pattern assignment implied by a config and seed.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pools: Pools,
    content: Vec<TokenId>,
    patterns: Vec<[TokenId; 2]>,
    entity_types: Vec<[usize; 2]>,
    noise: f64,
    vocab: Vocab,
}

impl SynthWorld {
    pub fn new(cfg: &SynthConfig, seed: u64) -> Result<SynthWorld> {
        cfg.validate()?;
        let pools = Pools::for_vocab(cfg.vocab_size)?;
        let mut rng = Rng::new(seed).fork("synth-world");
        let mut pairs = Vec::new();
        for i in 0..pools.trigger.len() {
            for j in i + 1..pools.trigger.len() {
                pairs.push([pools.trigger[i], pools.trigger[j]]);
            }
        }
        rng.shuffle(&mut pairs);
        pairs.truncate(cfg.num_relations);
        let entity_types =
            (0..cfg.num_relations).map(|_| [rng.below(ENTITY_TYPES), rng.below(ENTITY_TYPES)]).collect();
        Ok(SynthWorld {
            content: pools.content().collect(),
            vocab: pools.vocab(),
            pools,
            patterns: pairs,
            entity_types,
            noise: cfg.noise,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn relation_count(&self) -> usize {
        self.patterns.len()
    }

    pub fn trigger_pattern(&self, r: RelationId) -> [TokenId; 2] {
        self.patterns[r.0 as usize]
    }

    pub fn relation_names(&self) -> Vec<String> {
        (0..self.patterns.len()).map(|r| format!("rel{r:02}")).collect()
    }

    fn entity(&self, ty: usize, rng: &mut Rng) -> Vec<TokenId> {
        let group = self.pools.entity_group(ty);
        let len = if rng.bernoulli(0.3) { 2 } else { 1 };
        (0..len).map(|_| group[rng.below(group.len())]).collect()
    }

    pub fn sample(&self, r: RelationId, rng: &mut Rng) -> Instance {
        let idx = r.0 as usize;
        let [hty, tty] = self.entity_types[idx];
        let mut tokens = Vec::new();
        for _ in 0..rng.below(3) {
            tokens.push(self.pools.filler[rng.below(self.pools.filler.len())]);
        }
        let head_tokens = self.entity(hty, rng);
        let head = Span::new(tokens.len(), tokens.len() + head_tokens.len());
        tokens.extend(head_tokens);
        let mut trig = self.patterns[idx];
        if rng.bernoulli(0.5) {
            trig.swap(0, 1);
        }
        for t in trig {
            let tok = if rng.bernoulli(self.noise) { self.content[rng.below(self.content.len())] } else { t };
            tokens.push(tok);
        }
        let tail_tokens = self.entity(tty, rng);
        let tail = Span::new(tokens.len(), tokens.len() + tail_tokens.len());
        tokens.extend(tail_tokens);
        for _ in 0..rng.below(3) {
            tokens.push(self.pools.filler[rng.below(self.pools.filler.len())]);
        }
        Instance::new(tokens, head, tail, r).expect("synthetic instance is well formed")
    }
}

/// Generate a task stream. Task 1 holds relations `0..first.relations`, each
/// later task the next `n_way` relation ids.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<(Vocab, TaskStream)> {
    let world = SynthWorld::new(cfg, seed)?;
    let mut rng = Rng::new(seed).fork("synth-stream");
    let first = cfg.first_task();
    let mut tasks = Vec::with_capacity(cfg.tasks);
    let mut next = 0u32;
    for t in 0..cfg.tasks {
        let (n_rel, shots) = if t == 0 { (first.relations, first.shots) } else { (cfg.n_way, cfg.k_shot) };
        let relations: Vec<RelationId> = (next..next + n_rel as u32).map(RelationId).collect();
        next += n_rel as u32;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &r in &relations {
            for _ in 0..shots {
                train.push(world.sample(r, &mut rng));
            }
            for _ in 0..cfg.test_per_relation {
                test.push(world.sample(r, &mut rng));
            }
        }
        tasks.push(Task { id: t + 1, relations, train, test });
    }
    let stream = TaskStream { relation_names: world.relation_names(), tasks };
    stream.validate()?;
    Ok((world.vocab().clone(), stream))
}

/// Unlabelled-style corpus over every relation of the world, drawn from a
/// stream independent of [`synth_generate`]'s.
pub fn synth_corpus(cfg: &SynthConfig, seed: u64, per_relation: usize) -> Result<Vec<Instance>> {
    let world = SynthWorld::new(cfg, seed)?;
    let mut rng = Rng::new(seed).fork("synth-corpus");
    let mut out = Vec::with_capacity(per_relation * world.relation_count());
    for r in 0..world.relation_count() {
        for _ in 0..per_relation {
            out.push(world.sample(RelationId(r as u32), &mut rng));
        }
    }
    Ok(out)
}

/// Partition labelled instances into an N-way-K-shot stream. Relations are
/// assigned to tasks in a seeded random order; per relation, the first
/// `shots` shuffled instances train and the remainder test.
pub fn split_tasks(
    instances: &[Instance],
    relation_names: Vec<String>,
    n_way: usize,
    k_shot: usize,
    tasks: usize,
    first_task: Option<FirstTaskConfig>,
    seed: u64,
) -> Result<TaskStream> {
    if tasks == 0 || n_way == 0 || k_shot == 0 {
        return Err(Error::config("tasks, n_way and k_shot must all be positive"));
    }
    let first = first_task.unwrap_or(FirstTaskConfig { relations: n_way, shots: k_shot });
    let by = group_by_relation(instances);
    let needed = first.relations + n_way * (tasks - 1);
    if by.len() < needed {
        return Err(Error::config(format!(
            "{} relations available, {needed} needed for {tasks} tasks",
            by.len()
        )));
    }
    let root = Rng::new(seed);
    let mut order: Vec<RelationId> = by.keys().copied().collect();
    root.fork("split-relations").shuffle(&mut order);
    let mut shuffle_rng = root.fork("split-instances");

    let mut out = Vec::with_capacity(tasks);
    let mut cursor = 0;
    for t in 0..tasks {
        let (n_rel, shots) = if t == 0 { (first.relations, first.shots) } else { (n_way, k_shot) };
        let relations: Vec<RelationId> = order[cursor..cursor + n_rel].to_vec();
        cursor += n_rel;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for r in &relations {
            let mut pool = by[r].clone();
            if pool.len() <= shots {
                return Err(Error::config(format!(
                    "relation {r} has {} samples; {shots} train shots plus at least one test sample needed",
                    pool.len()
                )));
            }
            shuffle_rng.shuffle(&mut pool);
            test.extend(pool.split_off(shots));
            train.extend(pool);
        }
        out.push(Task { id: t + 1, relations, train, test });
    }
    let stream = TaskStream { relation_names, tasks: out };
    stream.validate()?;
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            vocab_size: 60,
            num_relations: 2,
            tasks: 1,
            n_way: 2,
            k_shot: 1,
            test_per_relation: 5,
            first_task: None,
            noise: 0.0,
        }
    }

    #[test]
    fn minimal_stream_has_distinct_triggers() {
        let (_, s) = synth_generate(&small_cfg(), 1).unwrap();
        assert_eq!(s.tasks.len(), 1);
        let train = &s.tasks[0].train;
        assert_eq!(train.len(), 2);
        let between = |i: &Instance| -> BTreeSet<TokenId> {
            i.tokens()[i.head().end..i.tail().start].iter().copied().collect()
        };
        assert_ne!(between(&train[0]), between(&train[1]));
    }

    #[test]
    fn determinism() {
        let cfg = SynthConfig { num_relations: 20, tasks: 3, n_way: 5, noise: 0.2, ..small_cfg() };
        assert_eq!(synth_generate(&cfg, 9).unwrap(), synth_generate(&cfg, 9).unwrap());
        assert_ne!(synth_generate(&cfg, 9).unwrap().1, synth_generate(&cfg, 10).unwrap().1);
    }

    /// Trigger-count oracle: label a test instance by majority vote of the
    /// training relations whose between-entity tokens match exactly.
    fn trigger_count_accuracy(stream: &TaskStream) -> f64 {
        let mut table: BTreeMap<Vec<TokenId>, BTreeMap<RelationId, usize>> = BTreeMap::new();
        let key = |i: &Instance| {
            let mut k: Vec<TokenId> = i.tokens()[i.head().end..i.tail().start].to_vec();
            k.sort_unstable();
            k
        };
        for t in &stream.tasks {
            for i in &t.train {
                *table.entry(key(i)).or_default().entry(i.relation()).or_default() += 1;
            }
        }
        let mut correct = 0;
        let mut total = 0;
        for t in &stream.tasks {
            for i in &t.test {
                total += 1;
                let pred = table.get(&key(i)).and_then(|c| {
                    c.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(r, _)| *r)
                });
                if pred == Some(i.relation()) {
                    correct += 1;
                }
            }
        }
        correct as f64 / total as f64
    }

    #[test]
    fn noise_free_stream_is_solved_by_trigger_counts() {
        let cfg = SynthConfig {
            num_relations: 40,
            tasks: 4,
            n_way: 10,
            k_shot: 2,
            test_per_relation: 10,
            ..small_cfg()
        };
        let (_, s) = synth_generate(&cfg, 3).unwrap();
        assert_eq!(trigger_count_accuracy(&s), 1.0);
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let too_many = SynthConfig { num_relations: 1000, ..small_cfg() };
        assert!(matches!(synth_generate(&too_many, 0), Err(Error::Config(_))));
        let short = SynthConfig { tasks: 3, ..small_cfg() };
        assert!(matches!(synth_generate(&short, 0), Err(Error::Config(_))));
        let tiny_vocab = SynthConfig { vocab_size: 14, ..small_cfg() };
        assert!(synth_generate(&tiny_vocab, 0).is_err());
        let noisy = SynthConfig { noise: 1.0, ..small_cfg() };
        assert!(synth_generate(&noisy, 0).is_err());
    }

    fn pool(relations: u32, per: usize) -> (Vec<Instance>, Vec<String>) {
        let mut out = Vec::new();
        for r in 0..relations {
            for k in 0..per {
                out.push(
                    Instance::new(
                        vec![20 + k as TokenId, 30 + r, 40],
                        Span::new(0, 1),
                        Span::new(2, 3),
                        RelationId(r),
                    )
                    .unwrap(),
                );
            }
        }
        (out, (0..relations).map(|r| format!("r{r}")).collect())
    }

    #[test]
    fn split_minimal() {
        let (inst, names) = pool(4, 3);
        let s = split_tasks(&inst, names, 2, 1, 2, None, 5).unwrap();
        assert_eq!(s.tasks.len(), 2);
        for t in &s.tasks {
            assert_eq!(t.relations.len(), 2);
            assert_eq!(t.train.len(), 2);
            assert_eq!(t.test.len(), 4);
        }
    }

    #[test]
    fn split_partitions_relations_and_instances() {
        let (inst, names) = pool(12, 6);
        let s = split_tasks(&inst, names, 3, 2, 3, Some(FirstTaskConfig { relations: 4, shots: 4 }), 8)
            .unwrap();
        let mut union = BTreeSet::new();
        let mut total = 0;
        for t in &s.tasks {
            for r in &t.relations {
                assert!(union.insert(*r));
            }
            total += t.relations.len();
            let train: BTreeSet<_> = t.train.iter().collect();
            assert!(t.test.iter().all(|i| !train.contains(i)));
        }
        assert_eq!(union.len(), total);
        assert_eq!(s.tasks[0].train.len(), 16);
        assert_eq!(s.tasks[1].train.len(), 6);
        for t in 1..=3 {
            let seen = s.seen_after(t);
            assert_eq!(seen.len(), s.tasks[..t].iter().map(|x| x.relations.len()).sum::<usize>());
        }
    }

    #[test]
    fn fewrel_shape() {
        let (inst, names) = pool(80, 110);
        let s = split_tasks(&inst, names, 10, 5, 8, Some(FirstTaskConfig { relations: 10, shots: 100 }), 1)
            .unwrap();
        assert_eq!(s.tasks.len(), 8);
        assert_eq!(s.tasks[0].train.len(), 1000);
        assert!(s.tasks[1..].iter().all(|t| t.relations.len() == 10 && t.train.len() == 50));
        let all: BTreeSet<_> = s.tasks.iter().flat_map(|t| t.relations.clone()).collect();
        assert_eq!(all.len(), 80);
    }

    #[test]
    fn split_rejects_short_relations() {
        let (inst, names) = pool(4, 1);
        assert!(matches!(split_tasks(&inst, names, 2, 1, 2, None, 0), Err(Error::Config(_))));
    }
}
