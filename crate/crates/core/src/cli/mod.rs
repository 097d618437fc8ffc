//! Commands behind the `fcre` binary. Each returns a `Result`; the binary
//! maps usage errors to exit code 2 and runtime failures to 1.

mod config;

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{apply_override, read_input, DataSource, ExperimentConfig, ModelSettings, PretrainSettings, OUTPUT_ROOT_ENV};

use crate::continual::{run_single, Aggregate, MethodConfig, RunResult};
use crate::data::{
    load_jsonl, read_jsonl, split_tasks, synth_corpus, synth_generate, template, write_jsonl, Instance, RelationId,
    Task, TaskStream, Vocab, VocabPolicy,
};
use crate::error::{Error, Result};
use crate::model::{forward, pretrain_mlm, Checkpoint, EncoderParams, EpochStat};
use crate::numerics::Rng;

/// Vocabulary, task stream and pretraining corpus of an experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocab,
    pub stream: TaskStream,
    pub corpus: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub id: usize,
    pub relations: Vec<String>,
    pub train: String,
    pub test: String,
    pub train_count: usize,
    pub test_count: usize,
}

/// Index written by `gen-data` next to the per-task JSONL files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub seed: Option<u64>,
    pub vocab: Vec<String>,
    pub vocab_hash: String,
    pub relation_names: Vec<String>,
    pub tasks: Vec<TaskEntry>,
    #[serde(default)]
    pub corpus: Option<String>,
    #[serde(default)]
    pub corpus_count: usize,
}

fn load_manifest_stream(path: &Path) -> Result<Prepared> {
    let manifest: StreamManifest = serde_json::from_str(&read_input(path)?)?;
    let vocab = Vocab::from_tokens(manifest.vocab.clone())?;
    if vocab.hash() != manifest.vocab_hash {
        return Err(Error::config(format!("{}: vocabulary hash mismatch", path.display())));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let read = |name: &str| -> Result<Vec<Instance>> {
        let p = dir.join(name);
        let file = fs::File::open(&p).map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
        let loaded = read_jsonl(BufReader::new(file), VocabPolicy::Fixed(vocab.clone()), manifest.relation_names.clone())?;
        if loaded.relation_names.len() != manifest.relation_names.len() {
            return Err(Error::config(format!("{} names relations missing from the manifest", p.display())));
        }
        Ok(loaded.instances)
    };
    let rel_id = |name: &String| -> Result<RelationId> {
        manifest
            .relation_names
            .iter()
            .position(|r| r == name)
            .map(|i| RelationId(i as u32))
            .ok_or_else(|| Error::config(format!("unknown relation {name:?} in manifest")))
    };
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for t in &manifest.tasks {
        tasks.push(Task {
            id: t.id,
            relations: t.relations.iter().map(rel_id).collect::<Result<_>>()?,
            train: read(&t.train)?,
            test: read(&t.test)?,
        });
    }
    let stream = TaskStream { relation_names: manifest.relation_names.clone(), tasks };
    stream.validate()?;
    let corpus = match &manifest.corpus {
        Some(name) => read(name)?,
        None => stream.tasks.iter().flat_map(|t| t.train.iter().cloned()).collect(),
    };
    Ok(Prepared { vocab, stream, corpus })
}

/// Build the stream and corpus an experiment describes.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    match &cfg.data {
        DataSource::Synthetic { config, seed, corpus_per_relation } => {
            let (vocab, stream) = synth_generate(config, *seed)?;
            let corpus = synth_corpus(config, *seed, *corpus_per_relation)?;
            Ok(Prepared { vocab, stream, corpus })
        }
        DataSource::Jsonl { path, n_way, k_shot, tasks, first_task, seed } => {
            if !path.is_file() {
                return Err(Error::config(format!("data file {} does not exist", path.display())));
            }
            let loaded = load_jsonl(path, VocabPolicy::Build)?;
            let stream =
                split_tasks(&loaded.instances, loaded.relation_names, *n_way, *k_shot, *tasks, *first_task, *seed)?;
            Ok(Prepared { vocab: loaded.vocab, stream, corpus: loaded.instances })
        }
        DataSource::Manifest { path } => load_manifest_stream(path),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::config(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))
}

/// Write per-task train/test JSONL, the pretraining corpus, and a manifest.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<StreamManifest> {
    let prepared = prepare_data(cfg)?;
    create_dir(out)?;
    let names = &prepared.stream.relation_names;
    let mut tasks = Vec::new();
    for task in &prepared.stream.tasks {
        let train = format!("task-{}.train.jsonl", task.id);
        let test = format!("task-{}.test.jsonl", task.id);
        write_jsonl(out.join(&train), &task.train, &prepared.vocab, names)?;
        write_jsonl(out.join(&test), &task.test, &prepared.vocab, names)?;
        tasks.push(TaskEntry {
            id: task.id,
            relations: task.relations.iter().map(|r| names[r.0 as usize].clone()).collect(),
            train,
            test,
            train_count: task.train.len(),
            test_count: task.test.len(),
        });
    }
    let corpus = "corpus.jsonl".to_string();
    write_jsonl(out.join(&corpus), &prepared.corpus, &prepared.vocab, names)?;
    let seed = match &cfg.data {
        DataSource::Synthetic { seed, .. } | DataSource::Jsonl { seed, .. } => Some(*seed),
        DataSource::Manifest { .. } => None,
    };
    let manifest = StreamManifest {
        seed,
        vocab: prepared.vocab.tokens().to_vec(),
        vocab_hash: prepared.vocab.hash(),
        relation_names: names.clone(),
        tasks,
        corpus: Some(corpus),
        corpus_count: prepared.corpus.len(),
    };
    write_file(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("pretrained.json")
}

/// Pretrain the encoder and LM head; writes the checkpoint and loss curve.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<(Checkpoint, Vec<EpochStat>)> {
    let prepared = prepare_data(cfg)?;
    let dims = cfg.model.dims(prepared.vocab.len())?;
    let mut params = EncoderParams::init(dims, &mut Rng::new(cfg.pretrain.seed).fork("init"))?;
    let curve = pretrain_mlm(&mut params, &prepared.corpus, &cfg.pretrain.config, cfg.pretrain.seed)?;
    create_dir(&cfg.output_dir)?;
    let ck = Checkpoint::new(params, prepared.vocab.hash());
    write_file(&checkpoint_path(cfg), ck.to_json()?)?;
    let mut csv = String::from("epoch,loss,accuracy,examples\n");
    for e in &curve {
        csv.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.accuracy, e.examples));
    }
    write_file(&cfg.output_dir.join("pretrain_curve.csv"), csv)?;
    Ok((ck, curve))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEntry {
    pub label: String,
    pub slug: String,
    pub config: MethodConfig,
}

/// Index of a results directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub methods: Vec<MethodEntry>,
    pub seeds: Vec<u64>,
    pub tasks: usize,
    pub vocab_hash: String,
}

pub fn slug(label: &str) -> String {
    let mut s = String::new();
    for c in label.to_lowercase().chars() {
        match c {
            'a'..='z' | '0'..='9' => s.push(c),
            '+' => s.push('-'),
            _ if !s.ends_with('-') => s.push('-'),
            _ => {}
        }
    }
    s.trim_matches('-').to_string()
}

pub fn results_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("results")
}

fn run_file(dir: &Path, seed: u64, ext: &str) -> PathBuf {
    dir.join(format!("seed-{seed}.{ext}"))
}

/// Outcome of `cmd_run`: aggregates of every method whose seeds all
/// finished, in config order (also written to `aggregate.json`).
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub aggregates: Vec<Aggregate>,
}

/// Run the method x seed grid. Each run rewrites its JSON after every task,
/// so an interrupted run leaves the finished rows on disk; a failed run
/// leaves a `.FAILED` marker with the error.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    if cfg.methods.is_empty() {
        return Err(Error::config("no methods configured"));
    }
    let prepared = prepare_data(cfg)?;
    let ck_path = checkpoint_path(cfg);
    if !ck_path.is_file() {
        return Err(Error::config(format!(
            "no pretrained checkpoint at {}; run the pretrain command first",
            ck_path.display()
        )));
    }
    let ck = Checkpoint::load(&ck_path, &prepared.vocab.hash())?;
    let dir = results_dir(cfg);
    create_dir(&dir)?;
    let methods: Vec<MethodEntry> = cfg
        .methods
        .iter()
        .map(|m| MethodEntry { label: m.label(), slug: slug(&m.label()), config: m.clone() })
        .collect();
    let manifest = RunManifest {
        methods: methods.clone(),
        seeds: cfg.seeds.clone(),
        tasks: prepared.stream.tasks.len(),
        vocab_hash: prepared.vocab.hash(),
    };
    write_file(&dir.join("run_manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    write_file(&dir.join("stream.json"), serde_json::to_string(&prepared.stream)?)?;
    for m in &methods {
        create_dir(&dir.join(&m.slug))?;
    }

    let cells: Vec<(usize, u64)> =
        (0..methods.len()).flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s))).collect();
    let outcomes: Vec<Result<RunResult>> = cells
        .par_iter()
        .map(|&(i, seed)| {
            let m = &methods[i];
            let mdir = dir.join(&m.slug);
            let _ = fs::remove_file(run_file(&mdir, seed, "FAILED"));
            let res = run_single(&prepared.stream, &ck.params, &m.config, seed, |partial, learner| {
                write_file(&run_file(&mdir, seed, "json"), serde_json::to_string_pretty(partial)?)?;
                if learner.tasks_done() == manifest.tasks {
                    let mut last = Checkpoint::new(learner.params.clone(), manifest.vocab_hash.clone());
                    last.memory = Some(learner.samples.clone());
                    write_file(&run_file(&mdir, seed, "ckpt.json"), last.to_json()?)?;
                }
                Ok(())
            })
            .and_then(|r| {
                write_file(&run_file(&mdir, seed, "csv"), r.to_csv()?)?;
                Ok(r)
            });
            match &res {
                Ok(_) => eprintln!("{} seed {seed}: done", m.label),
                Err(e) => {
                    eprintln!("{} seed {seed}: FAILED: {e}", m.label);
                    let _ = fs::write(run_file(&mdir, seed, "FAILED"), format!("{e}\n"));
                }
            }
            res.map_err(|e| Error::Experiment { seed, source: Box::new(e) })
        })
        .collect();

    let mut aggregates = Vec::new();
    let mut first_error = None;
    let mut idx = 0;
    for _ in &methods {
        let mut runs = Vec::new();
        for _ in &cfg.seeds {
            match &outcomes[idx] {
                Ok(r) => runs.push(r.clone()),
                Err(_) if first_error.is_none() => first_error = Some(idx),
                Err(_) => {}
            }
            idx += 1;
        }
        if runs.len() == cfg.seeds.len() {
            aggregates.push(Aggregate::from_runs(&runs)?);
        }
    }
    write_file(&dir.join("aggregate.json"), serde_json::to_string_pretty(&aggregates)?)?;
    if let Some(i) = first_error {
        return Err(outcomes.into_iter().nth(i).and_then(|r| r.err()).unwrap_or_else(|| Error::Protocol("run failed".into())));
    }
    Ok(RunSummary { dir, aggregates })
}

fn locate_results(dir: &Path) -> Result<PathBuf> {
    for cand in [dir.to_path_buf(), dir.join("results")] {
        if cand.join("run_manifest.json").is_file() {
            return Ok(cand);
        }
    }
    Err(Error::config(format!("{} holds no results (run_manifest.json missing)", dir.display())))
}

fn load_run_manifest(dir: &Path) -> Result<(PathBuf, RunManifest)> {
    let dir = locate_results(dir)?;
    let manifest: RunManifest = serde_json::from_str(&read_input(&dir.join("run_manifest.json"))?)?;
    Ok((dir, manifest))
}

/// Aggregated rows of a results directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub runs: usize,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub text: String,
    pub csv: String,
    pub gap_csv: String,
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Accuracy table (percent, 2 decimals) with a drop column, plus the gap
/// series. Only complete runs are included.
pub fn cmd_report(dir: &Path) -> Result<Report> {
    let (dir, manifest) = load_run_manifest(dir)?;
    let mut rows = Vec::new();
    for m in &manifest.methods {
        let mut runs = Vec::new();
        for &seed in &manifest.seeds {
            let p = run_file(&dir.join(&m.slug), seed, "json");
            let Ok(text) = fs::read_to_string(&p) else { continue };
            let run: RunResult = serde_json::from_str(&text)?;
            if run.tasks() == manifest.tasks && run.metrics().is_ok() {
                runs.push(run);
            }
        }
        if !runs.is_empty() {
            rows.push(ReportRow { method: m.label.clone(), runs: runs.len(), aggregate: Aggregate::from_runs(&runs)? });
        }
    }
    if rows.is_empty() {
        return Err(Error::config(format!("{} has no complete runs to report", dir.display())));
    }
    let t = manifest.tasks;
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut text = format!("{:width$}", "Method");
    let mut csv = String::from("method");
    let mut gap_csv = String::from("method");
    for j in 1..=t {
        text.push_str(&format!(" {:>7}", format!("T{j}")));
        csv.push_str(&format!(",T{j}"));
        gap_csv.push_str(&format!(",T{j}"));
    }
    text.push_str(&format!(" {:>7}\n", "Δ"));
    csv.push_str(",delta\n");
    gap_csv.push_str(",mean_2_to_T\n");
    let mut gap_text = format!("\nGeneralization gap (test loss - train loss)\n{:width$}", "Method");
    for j in 1..=t {
        gap_text.push_str(&format!(" {:>7}", format!("T{j}")));
    }
    gap_text.push_str(&format!(" {:>7}\n", "mean"));
    for row in &rows {
        let a = &row.aggregate;
        text.push_str(&format!("{:width$}", row.method));
        gap_text.push_str(&format!("{:width$}", row.method));
        csv.push_str(&row.method);
        gap_csv.push_str(&row.method);
        for j in 0..t {
            text.push_str(&format!(" {:>7}", pct(a.acc[j].mean)));
            csv.push_str(&format!(",{}", pct(a.acc[j].mean)));
            gap_text.push_str(&format!(" {:>7.4}", a.gap[j].mean));
            gap_csv.push_str(&format!(",{:.6}", a.gap[j].mean));
        }
        text.push_str(&format!(" {:>7}\n", pct(a.delta.mean)));
        csv.push_str(&format!(",{}\n", pct(a.delta.mean)));
        gap_text.push_str(&format!(" {:>7.4}\n", a.mean_gap.mean));
        gap_csv.push_str(&format!(",{:.6}\n", a.mean_gap.mean));
    }
    text.push_str(&gap_text);
    write_file(&dir.join("report.csv"), &csv)?;
    write_file(&dir.join("report_gap.csv"), &gap_csv)?;
    Ok(Report { rows, text, csv, gap_csv })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Classifier,
    LmHead,
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifier" => Ok(Branch::Classifier),
            "lm_head" | "lm-head" => Ok(Branch::LmHead),
            _ => Err(Error::config(format!("unknown branch {s:?}; expected classifier or lm_head"))),
        }
    }
}

/// CSV of the final model's features for every test instance of `task`
/// (1-based). `method` matches a label or slug; defaults to the first
/// method and seed.
pub fn cmd_dump_embeddings(
    dir: &Path,
    task: usize,
    branch: Branch,
    method: Option<&str>,
    seed: Option<u64>,
) -> Result<String> {
    let (dir, manifest) = load_run_manifest(dir)?;
    let entry = match method {
        Some(name) => manifest
            .methods
            .iter()
            .find(|m| m.label == name || m.slug == name)
            .ok_or_else(|| Error::config(format!("no method {name:?} in {}", dir.display())))?,
        None => manifest.methods.first().ok_or_else(|| Error::config("results list no methods"))?,
    };
    let seed = match seed {
        Some(s) if manifest.seeds.contains(&s) => s,
        Some(s) => return Err(Error::config(format!("seed {s} was not run"))),
        None => manifest.seeds[0],
    };
    if task == 0 || task > manifest.tasks {
        return Err(Error::config(format!("task {task} outside 1..={}", manifest.tasks)));
    }
    let stream: TaskStream = serde_json::from_str(&read_input(&dir.join("stream.json"))?)?;
    let ck_path = run_file(&dir.join(&entry.slug), seed, "ckpt.json");
    if !ck_path.is_file() {
        return Err(Error::config(format!("no final checkpoint at {}", ck_path.display())));
    }
    let ck = Checkpoint::load(&ck_path, &manifest.vocab_hash)?;
    let cfg = &entry.config;
    let mut out = String::new();
    for (i, inst) in stream.tasks[task - 1].test.iter().enumerate() {
        let fwd = forward(&ck.params, &template::apply(cfg.template, inst), cfg.family.uses_prompts())?;
        let v = match branch {
            Branch::Classifier => &fwd.g,
            Branch::LmHead => &fwd.logits,
        };
        if i == 0 {
            out.push_str("instance,relation");
            for k in 0..v.len() {
                out.push_str(&format!(",v{k}"));
            }
            out.push('\n');
        }
        let name = &stream.relation_names[inst.relation().0 as usize];
        out.push_str(&format!("{i},{name}"));
        for x in v {
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
    }
    Ok(out)
}
