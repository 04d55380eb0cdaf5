//! Tokenization, mention contexts, corpus ingestion and the synthetic
//! corpus generator.

mod context;
mod ingest;
mod records;
mod synthetic;
mod vocab;

pub use context::{
    make_context, make_context_with, make_linking_context, window_context, window_range, Context,
    Example, MaskStyle,
};
pub use ingest::{ingest_corpus, read_corpus, tokenize_record, CorpusData, ExampleStream, MentionRecord};
pub use records::{
    read_candidates, read_jsonl, write_jsonl, AliasRecord, CategoryRecord, CorpusRecord, QaRecord,
    TypingRecord,
};
pub use synthetic::{gen_synthetic, synthesize, SyntheticDataset, SyntheticFiles, SyntheticSpec};
pub use vocab::{build_vocab, Vocab, CLS, ENT_END, ENT_START, MASK, PAD, RESERVED, UNK};
