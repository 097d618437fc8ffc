//! Vocabulary, relation instances, prompt templates, synthetic streams and
//! JSONL ingestion.

mod instance;
pub mod jsonl;
mod synth;
pub mod template;
pub mod vocab;

pub use instance::{Instance, RelationId, Span, Task, TaskStream};
pub use jsonl::{load_jsonl, read_jsonl, write_jsonl, Loaded, Record, VocabPolicy};
pub use synth::{split_tasks, synth_corpus, synth_generate, FirstTaskConfig, SynthConfig, SynthWorld};
pub use template::{template_ar, template_mask, TemplateMode, Templated};
pub use vocab::{TokenId, Vocab};
