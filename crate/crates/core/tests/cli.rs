use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use fcre_core::cli::*;
use fcre_core::continual::{Aggregate, RunResult};
use fcre_core::data::{template, TaskStream};
use fcre_core::model::{forward, Checkpoint};

fn config_json(out: &Path) -> String {
    format!(
        r#"{{
  "data": {{"kind": "synthetic", "vocab_size": 40, "num_relations": 9, "tasks": 3, "n_way": 3, "k_shot": 2,
           "test_per_relation": 3, "noise": 0.1, "seed": 5, "corpus_per_relation": 3}},
  "model": {{"embed": 6, "hidden": 6, "feature": 6, "phi": 5}},
  "pretrain": {{"epochs": 2, "lr": 0.01, "seed": 2}},
  "methods": [{{"family": "CPL", "epochs": 2, "replay_epochs": 1}},
              {{"family": "CPL", "mi_enabled": true, "epochs": 2, "replay_epochs": 1}}],
  "seeds": [0, 1],
  "output_dir": "{}"
}}"#,
        out.display()
    )
}

fn write_config(dir: &Path, out: &Path) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, config_json(out)).unwrap();
    path
}

fn load(path: &Path, overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::load(path, &o).unwrap()
}

fn fcre(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_fcre")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn gen_data_counts_match_files_and_repeat() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = load(&write_config(tmp.path(), &tmp.path().join("out")), &[]);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let manifest = cmd_gen_data(&cfg, &a).unwrap();
    cmd_gen_data(&cfg, &b).unwrap();
    assert_eq!(manifest.tasks.len(), 3);
    for t in &manifest.tasks {
        assert_eq!(lines(&a.join(&t.train)), t.train_count);
        assert_eq!(lines(&a.join(&t.test)), t.test_count);
        assert_eq!(t.train_count, 3 * 2);
        assert_eq!(t.test_count, 3 * 3);
    }
    assert_eq!(lines(&a.join("corpus.jsonl")), manifest.corpus_count);
    assert_eq!(files(&a), files(&b));

    // The manifest reloads into the same stream.
    let original = prepare_data(&cfg).unwrap();
    let mut via = cfg.clone();
    via.data = DataSource::Manifest { path: a.join("manifest.json") };
    let reloaded = prepare_data(&via).unwrap();
    assert_eq!(reloaded.stream, original.stream);
    assert_eq!(reloaded.vocab, original.vocab);
    assert_eq!(reloaded.corpus, original.corpus);
}

#[test]
fn infeasible_split_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tmp.path().join("out"));
    let out = tmp.path().join("data");
    let (code, err) =
        fcre(&["gen-data", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", "data.num_relations=4"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("relations"), "{err}");
}

#[test]
fn missing_inputs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _) = fcre(&["pretrain", "-c", tmp.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(code, 2);
    let cfg = write_config(tmp.path(), &tmp.path().join("out"));
    let c = cfg.to_str().unwrap();
    let (code, err) = fcre(&["pretrain", "-c", c, "--set", "data={\"kind\":\"manifest\",\"path\":\"missing/manifest.json\"}"]);
    assert_eq!(code, 2, "{err}");
    let (code, err) = fcre(&["run", "-c", c]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("pretrain"));
    let (code, _) = fcre(&["report", tmp.path().to_str().unwrap()]);
    assert_eq!(code, 2);
    let (code, _) = fcre(&["no-such-command"]);
    assert_eq!(code, 2);
}

#[test]
fn pretrain_memorizes_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("one.jsonl");
    let line = r#"{"tokens":["alice","founded","acme","in","paris"],"head":[0,1],"tail":[2,3],"relation":"founder"}"#;
    fs::write(&data, format!("{}\n", vec![line; 12].join("\n"))).unwrap();
    let cfg_path = write_config(tmp.path(), &tmp.path().join("out"));
    let overrides = [
        "data={\"kind\":\"jsonl\",\"path\":\"one.jsonl\",\"n_way\":1,\"k_shot\":2,\"tasks\":1,\"seed\":0}",
        "pretrain.epochs=40",
        "pretrain.mask_prob=1.0",
        "pretrain.lr=0.05",
        "model.embed=12",
        "model.hidden=16",
        "model.feature=12",
    ];
    let cfg = load(&cfg_path, &overrides);
    let (_, curve) = cmd_pretrain(&cfg).unwrap();
    let csv = fs::read_to_string(cfg.output_dir.join("pretrain_curve.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let acc: f64 = last.split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(acc, curve.last().unwrap().accuracy);
    assert!(acc >= 0.99, "final masked accuracy {acc}");
    let first = fs::read(checkpoint_path(&cfg)).unwrap();
    cmd_pretrain(&cfg).unwrap();
    assert_eq!(first, fs::read(checkpoint_path(&cfg)).unwrap());
}

fn pretrained_config(tmp: &Path, name: &str) -> ExperimentConfig {
    let cfg = load(&write_config(tmp, &tmp.join(name)), &[]);
    cmd_pretrain(&cfg).unwrap();
    cfg
}

#[test]
fn run_writes_grid_and_repeats_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let a = pretrained_config(tmp.path(), "a");
    let b = pretrained_config(tmp.path(), "b");
    let summary = cmd_run(&a).unwrap();
    cmd_run(&b).unwrap();

    let mut run_jsons = 0;
    for slug in ["cpl", "cpl-mi"] {
        let da = summary.dir.join(slug);
        let db = results_dir(&b).join(slug);
        assert_eq!(files(&da), files(&db), "{slug}");
        run_jsons += files(&da).iter().filter(|(n, _)| n.ends_with(".json") && !n.contains("ckpt")).count();
    }
    assert_eq!(run_jsons, 4);
    assert_eq!(files(&summary.dir), files(&results_dir(&b)));

    // Aggregates recompute from the per-run files.
    let aggs: Vec<Aggregate> =
        serde_json::from_str(&fs::read_to_string(summary.dir.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(aggs.len(), 2);
    assert_eq!(aggs, summary.aggregates);
    for (agg, slug) in aggs.iter().zip(["cpl", "cpl-mi"]) {
        let runs: Vec<RunResult> = [0, 1]
            .iter()
            .map(|s| {
                let p = summary.dir.join(slug).join(format!("seed-{s}.json"));
                serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
            })
            .collect();
        let finals: Vec<f64> = runs
            .iter()
            .map(|r| {
                let row = r.accuracy.last().unwrap();
                row.iter().sum::<f64>() / row.len() as f64
            })
            .collect();
        let mean = (finals[0] + finals[1]) / 2.0;
        let std = (((finals[0] - mean).powi(2) + (finals[1] - mean).powi(2)) / 1.0).sqrt();
        assert!((agg.final_acc.mean - mean).abs() <= 1e-15);
        assert!((agg.final_acc.std - std).abs() <= 1e-15);
        let d: Vec<f64> = runs
            .iter()
            .map(|r| r.accuracy[0][0] - r.accuracy[2].iter().sum::<f64>() / 3.0)
            .collect();
        assert!((agg.delta.mean - (d[0] + d[1]) / 2.0).abs() <= 1e-15);
    }
}

#[test]
fn failed_run_keeps_finished_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = pretrained_config(tmp.path(), "out");
    let data = tmp.path().join("data");
    let mut manifest = cmd_gen_data(&cfg, &data).unwrap();
    // Task 2 has nothing to evaluate on, so every run stops after task 1's row.
    fs::write(data.join(&manifest.tasks[1].test), "").unwrap();
    manifest.tasks[1].test_count = 0;
    fs::write(data.join("manifest.json"), serde_json::to_string(&manifest).unwrap()).unwrap();
    cfg.data = DataSource::Manifest { path: data.join("manifest.json") };

    let err = cmd_run(&cfg).unwrap_err();
    assert!(!err.is_usage(), "{err}");
    let dir = results_dir(&cfg).join("cpl");
    assert!(dir.join("seed-0.FAILED").is_file());
    let partial: RunResult = serde_json::from_str(&fs::read_to_string(dir.join("seed-0.json")).unwrap()).unwrap();
    assert_eq!(partial.accuracy.len(), 1);
    assert!(!dir.join("seed-0.csv").exists());
    // Incomplete runs are not reportable.
    assert!(cmd_report(&results_dir(&cfg)).unwrap_err().is_usage());
}

fn write_fixture(dir: &Path, methods: &[(&str, Vec<Vec<f64>>)]) {
    let entries: Vec<serde_json::Value> = methods
        .iter()
        .map(|(label, _)| {
            serde_json::json!({"label": label, "slug": slug(label), "config": {"family": "SCKD"}})
        })
        .collect();
    let tasks = methods[0].1.len();
    let manifest = serde_json::json!({"methods": entries, "seeds": [0], "tasks": tasks, "vocab_hash": "x"});
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("run_manifest.json"), manifest.to_string()).unwrap();
    for (label, acc) in methods {
        let mut r = RunResult::new(*label, 0);
        r.accuracy = acc.clone();
        r.train_loss = (0..tasks).map(|j| 0.1 * j as f64).collect();
        r.test_loss = (0..tasks).map(|j| 0.25 * j as f64 + 0.05).collect();
        fs::create_dir_all(dir.join(slug(label))).unwrap();
        fs::write(dir.join(slug(label)).join("seed-0.json"), serde_json::to_string(&r).unwrap()).unwrap();
    }
}

/// Lower-triangular matrix whose first row is `first` and whose last row
/// averages to `last`.
fn matrix(first: f64, last: f64, tasks: usize) -> Vec<Vec<f64>> {
    (1..=tasks)
        .map(|j| {
            let avg = if j == 1 { first } else if j == tasks { last } else { 0.8 };
            (0..j).map(|i| avg + if j > 1 && i == 0 { 0.01 } else if j > 1 && i == 1 { -0.01 } else { 0.0 }).collect()
        })
        .collect()
}

#[test]
fn report_reproduces_table_arithmetic() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(
        tmp.path(),
        &[("SCKD", matrix(0.9475, 0.6298, 8)), ("CPL+MI", matrix(0.9469, 0.6627, 8))],
    );
    let report = cmd_report(tmp.path()).unwrap();
    assert_eq!(report.rows.len(), 2);
    let sckd = report.text.lines().find(|l| l.starts_with("SCKD")).unwrap();
    assert!(sckd.starts_with("SCKD") && sckd.trim_end().ends_with("31.77"), "{sckd}");
    assert!(sckd.contains("94.75") && sckd.contains("62.98"));
    let cpl = report.text.lines().find(|l| l.starts_with("CPL+MI")).unwrap();
    assert!(cpl.trim_end().ends_with("28.42"), "{cpl}");

    // CSV round trip against the JSON source.
    let csv = fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    let mut rows = csv.lines();
    let header: Vec<&str> = rows.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 1 + 8 + 1);
    for (row, (label, acc)) in rows.zip([("SCKD", matrix(0.9475, 0.6298, 8)), ("CPL+MI", matrix(0.9469, 0.6627, 8))]) {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[0], label);
        for j in 0..8 {
            let v: f64 = cells[1 + j].parse().unwrap();
            let src = 100.0 * acc[j].iter().sum::<f64>() / acc[j].len() as f64;
            assert!((v - src).abs() <= 0.005 + 1e-9, "{label} T{}: {v} vs {src}", j + 1);
        }
        let d: f64 = cells[9].parse().unwrap();
        let src = 100.0 * (acc[0][0] - acc[7].iter().sum::<f64>() / 8.0);
        assert!((d - src).abs() <= 0.01);
    }
    let gap = fs::read_to_string(tmp.path().join("report_gap.csv")).unwrap();
    let sckd_gap: Vec<f64> = gap.lines().nth(1).unwrap().split(',').skip(1).map(|x| x.parse().unwrap()).collect();
    for j in 0..8 {
        assert!((sckd_gap[j] - (0.15 * j as f64 + 0.05)).abs() < 1e-6);
    }

    let single = tempfile::tempdir().unwrap();
    write_fixture(single.path(), &[("CPL", matrix(0.9, 0.5, 4))]);
    let r = cmd_report(single.path()).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.csv.lines().next().unwrap(), "method,T1,T2,T3,T4,delta");
}

#[test]
fn embeddings_match_a_fresh_encoding() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = pretrained_config(tmp.path(), "out");
    let dir = cmd_run(&cfg).unwrap().dir;
    let stream: TaskStream = serde_json::from_str(&fs::read_to_string(dir.join("stream.json")).unwrap()).unwrap();
    let ck = Checkpoint::load(&dir.join("cpl-mi").join("seed-1.ckpt.json"), &prepare_data(&cfg).unwrap().vocab.hash())
        .unwrap();
    assert!(ck.memory.is_some());
    let vocab = ck.params.dims.vocab;

    for (branch, dim) in [(Branch::Classifier, 5), (Branch::LmHead, vocab)] {
        let csv = cmd_dump_embeddings(&dir, 2, branch, Some("CPL+MI"), Some(1)).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), 2 + dim);
        let test = &stream.tasks[1].test;
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), test.len());
        for (row, inst) in rows.iter().zip(test) {
            let cells: Vec<&str> = row.split(',').collect();
            let v: Vec<f64> = cells[2..].iter().map(|c| c.parse().unwrap()).collect();
            assert_eq!(v.len(), dim);
            assert_eq!(cells[1], stream.relation_names[inst.relation().0 as usize]);
            let fwd = forward(&ck.params, &template::template_mask(inst), true).unwrap();
            let expect = if branch == Branch::Classifier { fwd.g } else { fwd.logits };
            assert_eq!(v, expect);
            if branch == Branch::Classifier {
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }
    let r = dir.to_str().unwrap();
    assert_eq!(fcre(&["dump-embeddings", r, "--task", "4", "--branch", "classifier"]).0, 2);
    assert_eq!(fcre(&["dump-embeddings", r, "--task", "1", "--branch", "hidden"]).0, 2);
    assert_eq!(fcre(&["dump-embeddings", r, "--task", "1", "--branch", "classifier", "--method", "X"]).0, 2);
    assert_eq!(fcre(&["dump-embeddings", r, "--task", "1", "--branch", "lm_head"]).0, 0);
}
