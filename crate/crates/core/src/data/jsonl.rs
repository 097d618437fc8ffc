//! JSONL exchange format: one object per line with keys `tokens`, `head`,
//! `tail` (half-open `[start, end]` pairs) and `relation`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::instance::{Instance, RelationId, Span};
use super::vocab::Vocab;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub tokens: Vec<String>,
    pub head: [usize; 2],
    pub tail: [usize; 2],
    pub relation: String,
}

/// How tokens are mapped to ids while loading.
#[derive(Debug, Clone)]
pub enum VocabPolicy {
    /// Grow a fresh vocabulary from the file.
    Build,
    /// Use this vocabulary as-is; unknown tokens become `[UNK]`.
    Fixed(Vocab),
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub vocab: Vocab,
    pub instances: Vec<Instance>,
    pub relation_names: Vec<String>,
}

pub fn load_jsonl(path: impl AsRef<Path>, policy: VocabPolicy) -> Result<Loaded> {
    let file = File::open(path.as_ref())?;
    read_jsonl(BufReader::new(file), policy, Vec::new())
}

/// Parse JSONL from `reader`. Relation names are resolved against
/// `relation_names`, which is extended with any new names in file order.
pub fn read_jsonl(
    reader: impl BufRead,
    policy: VocabPolicy,
    mut relation_names: Vec<String>,
) -> Result<Loaded> {
    let (mut vocab, grow) = match policy {
        VocabPolicy::Build => (Vocab::new(), true),
        VocabPolicy::Fixed(v) => (v, false),
    };
    let mut instances = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        if rec.tokens.is_empty() {
            return Err(Error::Parse { line: lineno, message: "empty token list".into() });
        }
        let ids = rec
            .tokens
            .iter()
            .map(|t| if grow { vocab.insert(t) } else { vocab.lookup(t) })
            .collect();
        let rel = match relation_names.iter().position(|r| *r == rec.relation) {
            Some(p) => p,
            None => {
                relation_names.push(rec.relation.clone());
                relation_names.len() - 1
            }
        };
        let inst = Instance::new(
            ids,
            Span::new(rec.head[0], rec.head[1]),
            Span::new(rec.tail[0], rec.tail[1]),
            RelationId(rel as u32),
        )
        .map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        instances.push(inst);
    }
    Ok(Loaded { vocab, instances, relation_names })
}

pub fn to_record(inst: &Instance, vocab: &Vocab, relation_names: &[String]) -> Result<Record> {
    let tokens = inst
        .tokens()
        .iter()
        .map(|&id| {
            vocab
                .token(id)
                .map(str::to_string)
                .ok_or_else(|| Error::Index(format!("token id {id} outside vocabulary")))
        })
        .collect::<Result<_>>()?;
    let relation = relation_names
        .get(inst.relation().0 as usize)
        .cloned()
        .ok_or_else(|| Error::Index(format!("relation {} has no name", inst.relation())))?;
    Ok(Record {
        tokens,
        head: [inst.head().start, inst.head().end],
        tail: [inst.tail().start, inst.tail().end],
        relation,
    })
}

pub fn write_jsonl_to(
    mut w: impl Write,
    instances: &[Instance],
    vocab: &Vocab,
    relation_names: &[String],
) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut w, &to_record(inst, vocab, relation_names)?)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl(
    path: impl AsRef<Path>,
    instances: &[Instance],
    vocab: &Vocab,
    relation_names: &[String],
) -> Result<()> {
    let file = File::create(path.as_ref())?;
    write_jsonl_to(BufWriter::new(file), instances, vocab, relation_names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Loaded> {
        read_jsonl(s.as_bytes(), VocabPolicy::Build, Vec::new())
    }

    #[test]
    fn minimal_line() {
        let l = parse(r#"{"tokens":["a","b"],"head":[0,1],"tail":[1,2],"relation":"r1"}"#).unwrap();
        assert_eq!(l.instances.len(), 1);
        let inst = &l.instances[0];
        assert_eq!(inst.tokens().len(), 2);
        assert_eq!(inst.head(), Span::new(0, 1));
        assert_eq!(inst.tail(), Span::new(1, 2));
        assert_eq!(l.relation_names, vec!["r1".to_string()]);
    }

    #[test]
    fn out_of_range_span_names_line() {
        let src = concat!(
            r#"{"tokens":["a","b"],"head":[0,1],"tail":[1,2],"relation":"r1"}"#,
            "\n",
            r#"{"tokens":["a","b"],"head":[5,6],"tail":[1,2],"relation":"r1"}"#
        );
        match parse(src) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_and_empty() {
        assert!(matches!(parse("{not json"), Err(Error::Parse { line: 1, .. })));
        let empty = r#"{"tokens":[],"head":[0,1],"tail":[1,2],"relation":"r"}"#;
        assert!(matches!(parse(empty), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn fixed_vocab_maps_unknown_tokens() {
        let mut v = Vocab::new();
        v.insert("a");
        let l = read_jsonl(
            r#"{"tokens":["a","zzz"],"head":[0,1],"tail":[1,2],"relation":"r"}"#.as_bytes(),
            VocabPolicy::Fixed(v.clone()),
            Vec::new(),
        )
        .unwrap();
        assert_eq!(l.instances[0].tokens(), &[v.get("a").unwrap(), crate::data::vocab::UNK]);
        assert_eq!(l.vocab, v);
    }
}
