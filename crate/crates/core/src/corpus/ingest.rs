use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::{Path, PathBuf};

use super::context::{make_context, Example};
use super::records::CorpusRecord;
use super::vocab::Vocab;
use crate::error::{RelicError, Result};
use crate::neural::RngState;

/// A tokenized corpus record with the mention as a token range. Masking is
/// applied later, per epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MentionRecord {
    pub tokens: Vec<u32>,
    pub mention: (usize, usize),
    pub entity_id: String,
    pub doc_id: Option<String>,
}

/// Tokenize a record and map its char span onto the whitespace tokens it
/// overlaps. Returns `None` when the span is empty, out of range, or covers
/// no token.
pub fn tokenize_record(rec: &CorpusRecord, vocab: &Vocab) -> Option<MentionRecord> {
    let [cs, ce] = rec.mention_span;
    let n_chars = rec.text.chars().count();
    if cs >= ce || ce > n_chars || rec.entity_id.is_empty() {
        return None;
    }
    let mut tokens = Vec::new();
    let (mut first, mut last) = (None, None);
    let mut word = String::new();
    let mut word_start = 0;
    let mut flush = |word: &mut String, ws: usize, we: usize, tokens: &mut Vec<u32>| {
        if word.is_empty() {
            return;
        }
        if ws < ce && we > cs {
            first.get_or_insert(tokens.len());
            last = Some(tokens.len());
        }
        tokens.push(vocab.tokenize(word)[0]);
        word.clear();
    };
    for (ci, ch) in rec.text.chars().enumerate() {
        if ch.is_whitespace() {
            flush(&mut word, word_start, ci, &mut tokens);
        } else {
            if word.is_empty() {
                word_start = ci;
            }
            word.push(ch);
        }
    }
    flush(&mut word, word_start, n_chars, &mut tokens);
    Some(MentionRecord {
        mention: (first?, last? + 1),
        tokens,
        entity_id: rec.entity_id.clone(),
        doc_id: rec.doc_id.clone(),
    })
}

#[derive(Clone, Debug, Default)]
pub struct CorpusData {
    pub records: Vec<MentionRecord>,
    pub skipped: usize,
}

/// Read a whole corpus file into tokenized records, counting skips.
pub fn read_corpus(path: &Path, vocab: &Vocab) -> Result<CorpusData> {
    let mut data = CorpusData::default();
    for line in RecordLines::open(path)? {
        match tokenize_record(&line?, vocab) {
            Some(r) => data.records.push(r),
            None => data.skipped += 1,
        }
    }
    if data.skipped > 0 {
        log::warn!("{}: skipped {} unmappable records", path.display(), data.skipped);
    }
    Ok(data)
}

struct RecordLines {
    path: PathBuf,
    lines: Lines<BufReader<File>>,
    line_no: usize,
}

impl RecordLines {
    fn open(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| RelicError::io(path, e))?;
        Ok(RecordLines {
            path: path.to_path_buf(),
            lines: BufReader::new(f).lines(),
            line_no: 0,
        })
    }
}

impl Iterator for RecordLines {
    type Item = Result<CorpusRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(RelicError::io(&self.path, e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(serde_json::from_str(&line).map_err(|e| RelicError::Parse {
                path: self.path.clone(),
                line: self.line_no,
                message: e.to_string(),
            }));
        }
    }
}

/// Streaming reader yielding one masked [`Example`] per usable record.
pub struct ExampleStream<'v> {
    lines: RecordLines,
    vocab: &'v Vocab,
    mask_rate: f64,
    max_len: usize,
    rng: RngState,
    skipped: usize,
}

impl ExampleStream<'_> {
    /// Records skipped so far because their mention could not be mapped.
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl Iterator for ExampleStream<'_> {
    type Item = Result<Example>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let rec = match self.lines.next()? {
                Ok(r) => r,
                Err(e) => return Some(Err(e)),
            };
            let Some(m) = tokenize_record(&rec, self.vocab) else {
                self.skipped += 1;
                continue;
            };
            match make_context(&m.tokens, m.mention, self.mask_rate, self.max_len, &mut self.rng) {
                Ok(context) => {
                    return Some(Ok(Example {
                        context,
                        entity_id: m.entity_id,
                    }))
                }
                Err(_) => self.skipped += 1,
            }
        }
    }
}

pub fn ingest_corpus<'v>(
    path: &Path,
    vocab: &'v Vocab,
    mask_rate: f64,
    max_len: usize,
    seed: u64,
) -> Result<ExampleStream<'v>> {
    Ok(ExampleStream {
        lines: RecordLines::open(path)?,
        vocab,
        mask_rate,
        max_len,
        rng: RngState::new(seed),
        skipped: 0,
    })
}
