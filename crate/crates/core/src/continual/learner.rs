use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{Family, MethodConfig};
use super::objective::{
    conpl_dc_objective, conpl_objective, cpl_objective, sckd_objective, ConplStep, CplStep, OldTarget, SckdStep,
};
use crate::data::{template, Instance, RelationId, Task, Templated};
use crate::error::{Error, Result};
use crate::losses::{softmax_xent, Scored};
use crate::memory::{
    compute_prototype, entity_swap_augment, refresh_prototypes, select_typical, PrototypeMemory, SampleMemory,
};
use crate::model::{adam_for, adam_update, apply_freeze, forward, normalized, EncoderParams, FreezeMask, Forward};
use crate::numerics::{cosine, AdamConfig, AdamState, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub task: usize,
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Accuracy on each evaluated task's test set, in task order.
    pub accuracies: Vec<f64>,
    /// Mean per-sample probe loss over the pooled test sets.
    pub test_loss: f64,
}

/// How the current model scores a feature against every seen relation.
#[derive(Debug, Clone)]
enum Scorer {
    Linear,
    Prototypes(Vec<Vec<f64>>),
}

/// Continual learner state for one run.
#[derive(Debug, Clone)]
pub struct Learner {
    pub cfg: MethodConfig,
    pub params: EncoderParams,
    /// Seen relations in arrival order; a relation's class index is its
    /// position here.
    pub seen: Vec<RelationId>,
    pub samples: SampleMemory,
    pub prototypes: PrototypeMemory,
    rng: Rng,
    tasks_done: usize,
    /// Optimizer moments, reset at the start of every task.
    adam: AdamState,
}

struct Batcher<'a> {
    params: &'a mut EncoderParams,
    adam: &'a mut AdamState,
    mask: FreezeMask,
    batch_size: usize,
}

impl Batcher<'_> {
    /// One epoch over `n` items in a freshly shuffled order. Returns the mean
    /// objective over batches.
    fn epoch(
        &mut self,
        n: usize,
        rng: &mut Rng,
        mut step: impl FnMut(&EncoderParams, &[usize]) -> Result<Scored<EncoderParams>>,
    ) -> Result<f64> {
        if n == 0 {
            return Ok(0.0);
        }
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.batch_size) {
            let Scored { value, mut grads } = step(self.params, chunk)?;
            apply_freeze(&self.mask, &mut grads)?;
            adam_update(self.adam, self.params, &grads, &self.mask)?;
            if !value.is_finite() || !self.params.is_finite() {
                return Err(Error::Numeric("training produced a non-finite value".into()));
            }
            total += value;
            batches += 1;
        }
        Ok(total / batches as f64)
    }
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

impl Learner {
    /// Start from pretrained parameters, growing the relation classifier to
    /// `relation_capacity` rows when needed.
    pub fn new(pretrained: &EncoderParams, relation_capacity: usize, cfg: MethodConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = Rng::new(seed);
        let mut params = pretrained.clone();
        if params.dims.relations < relation_capacity {
            let mut init = rng.fork("classifier");
            let scale = 0.1 / (params.dims.phi as f64).sqrt();
            params.dims.relations = relation_capacity;
            params.cls_w = Matrix::filled_with(relation_capacity, params.dims.phi, || scale * init.normal());
            params.cls_b = Matrix::zeros(relation_capacity, 1);
        }
        let adam = adam_for(&params, AdamConfig::with_lr(cfg.lr));
        Ok(Learner {
            adam,
            cfg,
            params,
            seen: Vec::new(),
            samples: SampleMemory::new(),
            prototypes: PrototypeMemory::new(),
            rng,
            tasks_done: 0,
        })
    }

    pub fn tasks_done(&self) -> usize {
        self.tasks_done
    }

    pub fn template(&self, inst: &Instance) -> Templated {
        template::apply(self.cfg.template, inst)
    }

    pub fn forward(&self, inst: &Instance) -> Result<Forward> {
        forward(&self.params, &self.template(inst), self.cfg.family.uses_prompts())
    }

    fn features(&self, insts: &[Instance]) -> Result<Vec<Vec<f64>>> {
        insts.iter().map(|x| Ok(self.forward(x)?.g)).collect()
    }

    pub fn class_of(&self, r: RelationId) -> Result<usize> {
        self.seen
            .iter()
            .position(|s| *s == r)
            .ok_or_else(|| Error::Protocol(format!("relation {r} has not been seen")))
    }

    fn labels(&self, insts: &[Instance]) -> Result<Vec<usize>> {
        insts.iter().map(|x| self.class_of(x.relation())).collect()
    }

    fn batcher(&mut self) -> Batcher<'_> {
        let mask = if self.cfg.freeze_lm_head { FreezeMask::lm_head_only() } else { FreezeMask::none() };
        Batcher {
            adam: &mut self.adam,
            params: &mut self.params,
            mask,
            batch_size: self.cfg.batch_size,
        }
    }

    fn by_relation(insts: &[Instance]) -> BTreeMap<RelationId, Vec<Instance>> {
        let mut map: BTreeMap<RelationId, Vec<Instance>> = BTreeMap::new();
        for x in insts {
            map.entry(x.relation()).or_default().push(x.clone());
        }
        map
    }

    /// Keep `L` typical training instances for each new relation.
    fn store_typical(&mut self, task: &Task, rng: &mut Rng) -> Result<()> {
        let l = self.cfg.effective_memory_size();
        for (r, insts) in Self::by_relation(&task.train) {
            let feats = self.features(&insts)?;
            let keep = select_typical(&feats, l, rng);
            self.samples.store(r, pick(&insts, &keep))?;
        }
        Ok(())
    }

    fn start_task(&mut self, task: &Task) -> Result<()> {
        for r in &task.relations {
            if self.seen.contains(r) {
                return Err(Error::Protocol(format!("task {} reuses relation {r}", task.id)));
            }
        }
        if let Some(x) = task.train.iter().find(|x| !task.relations.contains(&x.relation())) {
            return Err(Error::Protocol(format!("task {} has a {} instance outside its relations", task.id, x.relation())));
        }
        if self.seen.len() + task.relations.len() > self.params.dims.relations
            && self.cfg.family == Family::Sckd
        {
            return Err(Error::config("relation classifier is smaller than the stream"));
        }
        self.seen.extend(task.relations.iter().copied());
        Ok(())
    }

    /// Train on one task; returns the per-epoch loss log.
    pub fn train_task(&mut self, task: &Task) -> Result<Vec<EpochLoss>> {
        let old_classes = self.seen.len();
        let old_params = (old_classes > 0).then(|| self.params.clone());
        let old_prototypes = self.prototypes.clone();
        self.start_task(task)?;
        self.adam = adam_for(&self.params, AdamConfig::with_lr(self.cfg.lr));
        let mut rng = self.rng.fork(&format!("task-{}", self.tasks_done));
        let logs = match self.cfg.family {
            Family::Sckd => self.train_sckd(task, old_params.as_ref(), old_classes, &mut rng)?,
            Family::ConPl => self.train_conpl(task, &old_prototypes, &mut rng)?,
            Family::Cpl => self.train_cpl(task, &mut rng)?,
        };
        self.tasks_done += 1;
        Ok(logs)
    }

    fn log(&self, logs: &mut Vec<EpochLoss>, phase: &str, epoch: usize, loss: f64) {
        logs.push(EpochLoss { task: self.tasks_done + 1, phase: phase.to_string(), epoch, loss });
    }

    fn old_targets(&self, old: &EncoderParams, insts: &[Instance], old_classes: usize) -> Result<Vec<OldTarget>> {
        insts
            .iter()
            .map(|x| {
                let fwd = forward(old, &self.template(x), false)?;
                let mut logits = old.cls_w.matvec_rows(&fwd.g, old_classes);
                for (l, b) in logits.iter_mut().zip(old.cls_b.as_slice()) {
                    *l += b;
                }
                Ok(OldTarget { feature: normalized(&fwd.f)?.0, logits })
            })
            .collect()
    }

    fn train_sckd(
        &mut self,
        task: &Task,
        old: Option<&EncoderParams>,
        old_classes: usize,
        rng: &mut Rng,
    ) -> Result<Vec<EpochLoss>> {
        let mut logs = Vec::new();
        let classes = self.seen.len();
        let cfg = self.cfg.clone();
        let mi = cfg.active_mi().copied();
        let sckd = cfg.sckd;

        let inputs: Vec<Templated> = task.train.iter().map(|x| self.template(x)).collect();
        let labels = self.labels(&task.train)?;
        let mut adapt = Vec::new();
        {
            let mut b = self.batcher();
            let step = SckdStep { classes, old_classes, old: None, cfg: &sckd };
            for _ in 0..cfg.epochs {
                adapt.push(b.epoch(inputs.len(), rng, |p, idx| {
                    sckd_objective(p, &pick(&inputs, idx), &pick(&labels, idx), &step, mi.as_ref())
                })?);
            }
        }
        for (e, l) in adapt.into_iter().enumerate() {
            self.log(&mut logs, "adapt", e, l);
        }

        self.store_typical(task, rng)?;
        let augmented = entity_swap_augment(&task.train, &self.params.emb, sckd.tau_sim);
        let memory = entity_swap_augment(&self.samples.all(), &self.params.emb, sckd.tau_sim);

        for (phase, set, epochs) in [("distill", &augmented, cfg.epochs), ("replay", &memory, cfg.replay_epochs)] {
            let inputs: Vec<Templated> = set.iter().map(|x| self.template(x)).collect();
            let labels = self.labels(set)?;
            let targets = match old {
                Some(o) => Some(self.old_targets(o, set, old_classes)?),
                None => None,
            };
            let mut losses = Vec::new();
            {
                let mut b = self.batcher();
                for _ in 0..epochs {
                    losses.push(b.epoch(inputs.len(), rng, |p, idx| {
                        let t = targets.as_ref().map(|t| pick(t, idx));
                        let step = SckdStep { classes, old_classes, old: t.as_deref(), cfg: &sckd };
                        sckd_objective(p, &pick(&inputs, idx), &pick(&labels, idx), &step, mi.as_ref())
                    })?);
                }
            }
            for (e, l) in losses.into_iter().enumerate() {
                self.log(&mut logs, phase, e, l);
            }
        }
        Ok(logs)
    }

    fn train_conpl(&mut self, task: &Task, stored: &PrototypeMemory, rng: &mut Rng) -> Result<Vec<EpochLoss>> {
        let mut logs = Vec::new();
        let cfg = self.cfg.clone();
        let mi = cfg.active_mi().copied();
        let new_by_rel = Self::by_relation(&task.train);

        let mut items = task.train.clone();
        let mut from_memory = vec![false; items.len()];
        let replay = self.samples.all();
        from_memory.extend(replay.iter().map(|_| true));
        items.extend(replay);
        let inputs: Vec<Templated> = items.iter().map(|x| self.template(x)).collect();
        let labels = self.labels(&items)?;

        // Prototypes per class index: stored ones for old relations,
        // temporary ones (refreshed every epoch) for the new relations.
        let protos_now = |learner: &Learner| -> Result<Vec<Vec<f64>>> {
            learner
                .seen
                .iter()
                .map(|r| match new_by_rel.get(r) {
                    Some(insts) => compute_prototype(&learner.features(insts)?),
                    None => stored.vectors_for(&[*r]).map(|mut v| v.remove(0)),
                })
                .collect()
        };
        let mut losses = Vec::new();
        for _ in 0..cfg.epochs {
            let protos = protos_now(self)?;
            let step = ConplStep { protos: &protos, from_memory: &[], fc_sets: None, cfg: &cfg.conpl };
            let mut b = self.batcher();
            let l = b.epoch(inputs.len(), rng, |p, idx| {
                let flags = pick(&from_memory, idx);
                let step = ConplStep { from_memory: &flags, ..step.clone() };
                conpl_objective(p, &pick(&inputs, idx), &pick(&labels, idx), &step, mi.as_ref())
            })?;
            losses.push(l);
        }
        for (e, l) in losses.into_iter().enumerate() {
            self.log(&mut logs, "train", e, l);
        }

        self.store_typical(task, rng)?;
        // Old relations keep their stored prototypes as consistency targets;
        // new relations take the mean of their freshly stored samples.
        let mut targets = Vec::with_capacity(self.seen.len());
        for r in &self.seen {
            targets.push(match stored.get(*r) {
                Some(p) => p.vector.clone(),
                None => compute_prototype(&self.features(self.samples.get(*r))?)?,
            });
        }
        let mem = self.samples.all();
        let mem_inputs: Vec<Templated> = mem.iter().map(|x| self.template(x)).collect();
        let mem_labels = self.labels(&mem)?;
        let mut losses = Vec::new();
        {
            let mut b = self.batcher();
            for _ in 0..cfg.replay_epochs {
                losses.push(b.epoch(mem_inputs.len(), rng, |p, idx| {
                    conpl_dc_objective(p, &pick(&mem_inputs, idx), &pick(&mem_labels, idx), &targets, &cfg.conpl, mi.as_ref())
                })?);
            }
        }
        for (e, l) in losses.into_iter().enumerate() {
            self.log(&mut logs, "memory", e, l);
        }
        let task_no = self.tasks_done + 1;
        let (params, uses_prompts, mode) = (&self.params, cfg.family.uses_prompts(), cfg.template);
        self.prototypes = refresh_prototypes(&self.samples, task_no, |x| {
            Ok(forward(params, &template::apply(mode, x), uses_prompts)?.g)
        })?;
        Ok(logs)
    }

    fn train_cpl(&mut self, task: &Task, rng: &mut Rng) -> Result<Vec<EpochLoss>> {
        let mut logs = Vec::new();
        let cfg = self.cfg.clone();
        let mi = cfg.active_mi().copied();
        let inputs: Vec<Templated> = task.train.iter().map(|x| self.template(x)).collect();
        let labels = self.labels(&task.train)?;
        let memory = self.samples.all();
        let memory_labels = self.labels(&memory)?;

        let mut losses = Vec::new();
        for _ in 0..cfg.epochs {
            let bank: Vec<(Vec<f64>, usize)> =
                self.features(&memory)?.into_iter().zip(memory_labels.iter().copied()).collect();
            let mut b = self.batcher();
            let l = b.epoch(inputs.len(), rng, |p, idx| {
                let step = CplStep { bank: &bank, skip: &[], cfg: &cfg.cpl };
                cpl_objective(p, &pick(&inputs, idx), &pick(&labels, idx), &step, mi.as_ref())
            })?;
            losses.push(l);
        }
        for (e, l) in losses.into_iter().enumerate() {
            self.log(&mut logs, "train", e, l);
        }

        self.store_typical(task, rng)?;
        let replay = entity_swap_augment(&self.samples.all(), &self.params.emb, cfg.sckd.tau_sim);
        let replay_inputs: Vec<Templated> = replay.iter().map(|x| self.template(x)).collect();
        let replay_labels = self.labels(&replay)?;
        let mut losses = Vec::new();
        for _ in 0..cfg.replay_epochs {
            let bank: Vec<(Vec<f64>, usize)> =
                self.features(&replay)?.into_iter().zip(replay_labels.iter().copied()).collect();
            let mut b = self.batcher();
            let l = b.epoch(replay_inputs.len(), rng, |p, idx| {
                let skip: Vec<Option<usize>> = idx.iter().map(|&i| Some(i)).collect();
                let step = CplStep { bank: &bank, skip: &skip, cfg: &cfg.cpl };
                cpl_objective(p, &pick(&replay_inputs, idx), &pick(&replay_labels, idx), &step, mi.as_ref())
            })?;
            losses.push(l);
        }
        for (e, l) in losses.into_iter().enumerate() {
            self.log(&mut logs, "replay", e, l);
        }
        Ok(logs)
    }

    fn scorer(&self) -> Result<Scorer> {
        match self.cfg.family {
            Family::Sckd => Ok(Scorer::Linear),
            Family::ConPl => Ok(Scorer::Prototypes(self.prototypes.vectors_for(&self.seen)?)),
            Family::Cpl => {
                let mut protos = Vec::with_capacity(self.seen.len());
                for r in &self.seen {
                    let stored = self.samples.get(*r);
                    if stored.is_empty() {
                        return Err(Error::Protocol(format!("no memory to build a prototype for {r}")));
                    }
                    protos.push(compute_prototype(&self.features(stored)?)?);
                }
                Ok(Scorer::Prototypes(protos))
            }
        }
    }

    fn scores(&self, scorer: &Scorer, g: &[f64]) -> Result<Vec<f64>> {
        match scorer {
            Scorer::Linear => {
                let n = self.seen.len();
                let mut l = self.params.cls_w.matvec_rows(g, n);
                for (x, b) in l.iter_mut().zip(self.params.cls_b.as_slice()) {
                    *x += b;
                }
                Ok(l)
            }
            Scorer::Prototypes(protos) => protos.iter().map(|p| cosine(g, p)).collect(),
        }
    }

    /// Class scores of `inst` over every seen relation (arrival order).
    pub fn class_scores(&self, inst: &Instance) -> Result<Vec<f64>> {
        let scorer = self.scorer()?;
        self.scores(&scorer, &self.forward(inst)?.g)
    }

    /// Index of the best score; ties go to the lowest relation id.
    pub fn argmax_relation(&self, scores: &[f64]) -> RelationId {
        let mut order: Vec<usize> = (0..self.seen.len()).collect();
        order.sort_by_key(|&i| self.seen[i]);
        let mut best = order[0];
        for &i in &order[1..] {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        self.seen[best]
    }

    pub fn predict(&self, inst: &Instance) -> Result<RelationId> {
        if self.seen.is_empty() {
            return Err(Error::Protocol("nothing has been learned yet".into()));
        }
        Ok(self.argmax_relation(&self.class_scores(inst)?))
    }

    /// Mean per-sample probe loss (softmax cross-entropy over the scores
    /// used for prediction).
    pub fn probe_loss(&self, insts: &[Instance]) -> Result<f64> {
        let scorer = self.scorer()?;
        self.probe_with(&scorer, insts)
    }

    fn probe_with(&self, scorer: &Scorer, insts: &[Instance]) -> Result<f64> {
        if insts.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for x in insts {
            let s = self.scores(scorer, &self.forward(x)?.g)?;
            total += softmax_xent(&s, self.class_of(x.relation())?)?.value;
        }
        Ok(total / insts.len() as f64)
    }

    /// Accuracy on each task's test set, predicting over all seen relations.
    pub fn evaluate(&self, tasks: &[Task]) -> Result<Evaluation> {
        let scorer = self.scorer()?;
        let mut accuracies = Vec::with_capacity(tasks.len());
        let mut pooled = Vec::new();
        for task in tasks {
            if task.test.is_empty() {
                return Err(Error::Protocol(format!("task {} has no test instances", task.id)));
            }
            let mut correct = 0usize;
            for x in &task.test {
                self.class_of(x.relation())?;
                let s = self.scores(&scorer, &self.forward(x)?.g)?;
                correct += usize::from(self.argmax_relation(&s) == x.relation());
            }
            accuracies.push(correct as f64 / task.test.len() as f64);
            pooled.extend(task.test.iter().cloned());
        }
        let test_loss = self.probe_with(&scorer, &pooled)?;
        Ok(Evaluation { accuracies, test_loss })
    }
}
