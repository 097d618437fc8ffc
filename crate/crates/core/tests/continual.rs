use fcre_core::continual::{run_single, Family, Learner, MethodConfig};
use fcre_core::data::{synth_generate, Instance, RelationId, SynthConfig, Task, TaskStream, Vocab};
use fcre_core::model::{forward, EncoderParams, ModelDims};
use fcre_core::numerics::Rng;
use fcre_core::Error;
use proptest::prelude::*;

fn stream(tasks: usize, n_way: usize, k_shot: usize, seed: u64) -> (Vocab, TaskStream) {
    let cfg = SynthConfig {
        vocab_size: 40,
        num_relations: tasks * n_way,
        tasks,
        n_way,
        k_shot,
        test_per_relation: 5,
        first_task: None,
        noise: 0.0,
    };
    synth_generate(&cfg, seed).unwrap()
}

fn params(vocab: usize) -> EncoderParams {
    let dims = ModelDims { vocab, embed: 8, hidden: 12, feature: 8, phi: 8, prompts: 4, relations: 0 };
    EncoderParams::init(dims, &mut Rng::new(11)).unwrap()
}

fn method(family: Family, mi: bool) -> MethodConfig {
    let mut m = MethodConfig::new(family, mi);
    m.epochs = 3;
    m.replay_epochs = 2;
    m.batch_size = 4;
    m.lr = 5e-3;
    m
}

#[test]
fn one_task_is_learned_by_every_family() {
    let (vocab, s) = stream(1, 2, 6, 3);
    let p = params(vocab.len());
    for family in Family::ALL {
        let mut cfg = method(family, false);
        cfg.epochs = 60;
        cfg.lr = 1e-2;
        let mut learner = Learner::new(&p, s.relation_count(), cfg, 0).unwrap();
        learner.train_task(&s.tasks[0]).unwrap();
        let on_train = Task { test: s.tasks[0].train.clone(), ..s.tasks[0].clone() };
        let acc = learner.evaluate(&[on_train]).unwrap().accuracies[0];
        assert!(acc >= 0.95, "{family}: train accuracy {acc}");
    }
}

#[test]
fn zero_mi_weight_reproduces_the_base_trajectory() {
    let (vocab, s) = stream(3, 3, 3, 5);
    let p = params(vocab.len());
    for family in Family::ALL {
        let base = run_single(&s, &p, &method(family, false), 7, |_, _| Ok(())).unwrap();
        let mut zero = method(family, true);
        zero.mi.weight = 0.0;
        let with_zero = run_single(&s, &p, &zero, 7, |_, _| Ok(())).unwrap();
        assert_eq!(base.accuracy, with_zero.accuracy, "{family}");
        assert_eq!(base.losses, with_zero.losses, "{family}");
        assert_eq!(base.test_loss, with_zero.test_loss, "{family}");
    }
}

#[test]
fn frozen_lm_head_never_moves() {
    let (vocab, s) = stream(3, 3, 3, 6);
    let p = params(vocab.len());
    for family in Family::ALL {
        let mut cfg = method(family, true);
        cfg.freeze_lm_head = true;
        let r = run_single(&s, &p, &cfg, 1, |_, learner| {
            assert_eq!(learner.params.w_lm, p.w_lm);
            assert_eq!(learner.params.b_lm, p.b_lm);
            Ok(())
        })
        .unwrap();
        let m = r.metrics().unwrap();
        assert!(m.acc.iter().chain(&m.gap).all(|x| x.is_finite()) && m.delta.is_finite());
        // Without the freeze the head does move.
        let mut moved = false;
        run_single(&s, &p, &method(family, true), 1, |_, learner| {
            moved |= learner.params.w_lm != p.w_lm;
            Ok(())
        })
        .unwrap();
        assert!(moved, "{family}");
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Brute-force prediction: score every seen relation, take the maximum,
/// breaking ties towards the smaller relation id.
fn oracle_predict(learner: &Learner, x: &Instance, stored_protos: Option<&[Vec<f64>]>) -> RelationId {
    let cfg = &learner.cfg;
    let feat = |i: &Instance| {
        forward(&learner.params, &fcre_core::data::template::apply(cfg.template, i), cfg.family.uses_prompts())
            .unwrap()
            .g
    };
    let g = feat(x);
    let mut best: Option<(f64, RelationId)> = None;
    for (c, r) in learner.seen.iter().enumerate() {
        let score = match cfg.family {
            Family::Sckd => {
                let row = learner.params.cls_w.row(c);
                row.iter().zip(&g).map(|(w, v)| w * v).sum::<f64>() + learner.params.cls_b.as_slice()[c]
            }
            Family::ConPl => cos(&g, &stored_protos.unwrap()[c]),
            Family::Cpl => {
                let mem = learner.samples.get(*r);
                let mut mean = vec![0.0; g.len()];
                for m in mem {
                    for (a, v) in mean.iter_mut().zip(feat(m)) {
                        *a += v / mem.len() as f64;
                    }
                }
                cos(&g, &mean)
            }
        };
        best = match best {
            Some((s, b)) if s > score || (s == score && b < *r) => Some((s, b)),
            _ => Some((score, *r)),
        };
    }
    best.unwrap().1
}

#[test]
fn evaluation_matches_exhaustive_argmax() {
    let (vocab, s) = stream(3, 3, 3, 8);
    let p = params(vocab.len());
    let mut rng = Rng::new(99);
    for family in Family::ALL {
        let mut learner = Learner::new(&p, s.relation_count(), method(family, true), 2).unwrap();
        for (j, task) in s.tasks.iter().enumerate() {
            learner.train_task(task).unwrap();
            let protos: Vec<Vec<f64>> =
                learner.seen.iter().filter_map(|r| learner.prototypes.get(*r).map(|p| p.vector.clone())).collect();
            let pool: Vec<&Instance> = s.tasks[..=j].iter().flat_map(|t| t.test.iter()).collect();
            let mut correct = vec![0usize; j + 1];
            for t in 0..=j {
                for x in &s.tasks[t].test {
                    correct[t] += usize::from(oracle_predict(&learner, x, Some(&protos)) == x.relation());
                }
            }
            for _ in 0..50 {
                let x = pool[rng.below(pool.len())];
                assert_eq!(learner.predict(x).unwrap(), oracle_predict(&learner, x, Some(&protos)), "{family}");
            }
            let eval = learner.evaluate(&s.tasks[..=j]).unwrap();
            for t in 0..=j {
                assert_eq!(eval.accuracies[t], correct[t] as f64 / s.tasks[t].test.len() as f64);
            }
        }
    }
}

#[test]
fn reused_relation_is_rejected() {
    let (vocab, s) = stream(2, 2, 2, 9);
    let p = params(vocab.len());
    for family in Family::ALL {
        let mut learner = Learner::new(&p, s.relation_count(), method(family, false), 0).unwrap();
        learner.train_task(&s.tasks[0]).unwrap();
        let err = learner.train_task(&s.tasks[0]).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{family}: {err}");
        let mut bad = s.tasks[1].clone();
        bad.relations.push(s.tasks[0].relations[0]);
        assert!(matches!(learner.train_task(&bad), Err(Error::Protocol(_))));
    }
}

#[test]
fn runs_are_byte_identical() {
    let (vocab, s) = stream(3, 2, 3, 10);
    let p = params(vocab.len());
    for family in Family::ALL {
        let cfg = method(family, true);
        let a = run_single(&s, &p, &cfg, 4, |_, _| Ok(())).unwrap();
        let b = run_single(&s, &p, &cfg, 4, |_, _| Ok(())).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = run_single(&s, &p, &cfg, 5, |_, _| Ok(())).unwrap();
        assert_ne!(a.losses, c.losses);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn prediction_ignores_monotone_rescaling(
        scores in proptest::collection::vec(-3i32..3, 1..8),
        a in 0.1f64..5.0,
        b in -2.0f64..2.0,
    ) {
        let (vocab, s) = stream(1, 8, 1, 12);
        let p = params(vocab.len());
        let mut learner = Learner::new(&p, s.relation_count(), method(Family::Sckd, false), 0).unwrap();
        learner.seen = s.tasks[0].relations[..scores.len()].to_vec();
        learner.seen.reverse();
        let raw: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
        let affine: Vec<f64> = raw.iter().map(|x| a * x + b).collect();
        let exp: Vec<f64> = raw.iter().map(|x| x.exp()).collect();
        let pick = learner.argmax_relation(&raw);
        prop_assert_eq!(pick, learner.argmax_relation(&affine));
        prop_assert_eq!(pick, learner.argmax_relation(&exp));
        let top = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lowest_tied = learner.seen.iter().zip(&raw).filter(|(_, &v)| v == top).map(|(r, _)| *r).min().unwrap();
        prop_assert_eq!(pick, lowest_tied);
    }
}
