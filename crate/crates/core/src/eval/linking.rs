use std::collections::HashMap;

use log::warn;
use serde::Serialize;

use crate::corpus::{make_linking_context, AliasRecord, Example, MentionRecord, Vocab};
use crate::error::{RelicError, Result};
use crate::store::{nn_search, rank_rows, CandidateSet};
use crate::trainer::Checkpoint;

/// Mention string (lowercased) → permissible entities.
#[derive(Clone, Debug, Default)]
pub struct AliasTable {
    map: HashMap<String, CandidateSet>,
}

impl AliasTable {
    /// Entries for the same mention string are merged.
    pub fn from_records(records: &[AliasRecord]) -> Self {
        let mut merged: HashMap<String, Vec<String>> = HashMap::new();
        for r in records {
            merged
                .entry(r.mention.to_lowercase())
                .or_default()
                .extend(r.candidates.iter().cloned());
        }
        AliasTable {
            map: merged.into_iter().map(|(k, v)| (k, CandidateSet::new(v))).collect(),
        }
    }

    pub fn get(&self, mention: &str) -> Option<&CandidateSet> {
        self.map.get(&mention.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Surface string of token ids `span` joined by single spaces.
pub fn mention_string(vocab: &Vocab, tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|t| vocab.token_of(*t).unwrap_or("[UNK]"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LinkingResult {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Mentions whose gold entity could not be returned (absent from the
    /// table or filtered out of the candidates). Included in `total`.
    pub unreachable: usize,
    /// Mentions that could not be turned into an encoder input.
    pub skipped: usize,
    /// Expected accuracy of picking uniformly within each mention's
    /// candidates.
    pub random_floor: f64,
}

/// Link every gold mention to the nearest entity, restricted to its alias
/// entry (when `aliases` has one) intersected with `candidates`.
pub fn linking_eval(
    ckpt: &Checkpoint,
    mentions: &[MentionRecord],
    aliases: Option<&AliasTable>,
    candidates: Option<&CandidateSet>,
) -> Result<LinkingResult> {
    let table = &ckpt.table;
    let metric = ckpt.config.metric;
    let budget = ckpt.config.encoder.max_len;
    let mut res = LinkingResult::default();
    let mut floor = 0.0;
    for m in mentions {
        let ctx = match make_linking_context(&m.tokens, m.mention, budget) {
            Ok(c) => c,
            Err(e) => {
                warn!("skipping mention of {}: {e}", m.entity_id);
                res.skipped += 1;
                continue;
            }
        };
        res.total += 1;
        let surface = mention_string(&ckpt.vocab, &m.tokens[m.mention.0..m.mention.1]);
        let allowed: Option<CandidateSet> = match (aliases.and_then(|a| a.get(&surface)), candidates) {
            (Some(a), Some(c)) => Some(a.intersect(c)),
            (Some(a), None) => Some(a.clone()),
            (None, Some(c)) => Some(c.clone()),
            (None, None) => None,
        };
        let reachable = table.index_of(&m.entity_id).is_some()
            && allowed.as_ref().is_none_or(|a| a.contains(&m.entity_id));
        if !reachable {
            res.unreachable += 1;
        }
        let pool = match &allowed {
            Some(a) => a.resolve(table).0.len(),
            None => table.len(),
        };
        if pool == 0 {
            continue;
        }
        if reachable {
            floor += 1.0 / pool as f64;
        }
        let g = ckpt.encode(&ctx)?;
        let top = nn_search(table, &g, 1, metric, allowed.as_ref())?;
        if top.top().is_some_and(|(id, _)| *id == m.entity_id) {
            res.correct += 1;
        }
    }
    if res.total > 0 {
        res.accuracy = res.correct as f64 / res.total as f64;
        res.random_floor = floor / res.total as f64;
    }
    Ok(res)
}

/// Fraction of examples whose top-1 entity over the whole table is gold.
pub fn retrieval_accuracy(ckpt: &Checkpoint, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(RelicError::Empty("no examples to retrieve for".into()));
    }
    let mut hits = 0usize;
    for ex in examples {
        let g = ckpt.encode(&ex.context)?;
        let top = rank_rows(&ckpt.table, &g, 1, ckpt.config.metric, None)?;
        hits += usize::from(ckpt.table.id(top[0].0) == ex.entity_id);
    }
    Ok(hits as f64 / examples.len() as f64)
}
