use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::vocab::{CLS, ENT_END, ENT_START, MASK};
use crate::error::{RelicError, Result};
use crate::neural::RngState;

/// Encoder input: `[CLS]` followed by tokens, with at most one mention
/// wrapped in `[E_s]`/`[E_e]`. Question contexts carry no markers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    token_ids: Vec<u32>,
    mention_span: Option<(usize, usize)>,
}

impl Context {
    /// Validates the marker layout and records the marker positions.
    pub fn new(token_ids: Vec<u32>) -> Result<Self> {
        if token_ids.first() != Some(&CLS) {
            return Err(RelicError::BadMention("context must start with [CLS]".into()));
        }
        if token_ids[1..].contains(&CLS) {
            return Err(RelicError::BadMention("[CLS] may only appear at position 0".into()));
        }
        let starts: Vec<usize> = positions(&token_ids, ENT_START);
        let ends: Vec<usize> = positions(&token_ids, ENT_END);
        let mention_span = match (starts.as_slice(), ends.as_slice()) {
            ([], []) => None,
            ([k], [j]) if *j > *k + 1 => Some((*k, *j)),
            _ => {
                return Err(RelicError::BadMention(format!(
                    "need one [E_s] before one [E_e] around a nonempty mention, got starts {starts:?} ends {ends:?}"
                )))
            }
        };
        Ok(Context {
            token_ids,
            mention_span,
        })
    }

    /// Question-style context: `[CLS]` + tokens, no mention markers.
    pub fn question(tokens: &[u32]) -> Result<Self> {
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(CLS);
        ids.extend_from_slice(tokens);
        let c = Context::new(ids)?;
        if c.mention_span.is_some() {
            return Err(RelicError::BadMention("question contains mention markers".into()));
        }
        Ok(c)
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    /// Positions (k, j) of `[E_s]` and `[E_e]`.
    pub fn mention_span(&self) -> Option<(usize, usize)> {
        self.mention_span
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn mention_tokens(&self) -> Option<&[u32]> {
        self.mention_span.map(|(k, j)| &self.token_ids[k + 1..j])
    }
}

fn positions(ids: &[u32], tok: u32) -> Vec<usize> {
    ids.iter()
        .enumerate()
        .filter(|(_, t)| **t == tok)
        .map(|(i, _)| i)
        .collect()
}

/// A training pair: a context with a marked mention and its gold entity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub context: Context,
    pub entity_id: String,
}

/// How a masked mention is replaced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStyle {
    /// The whole mention becomes one `[MASK]`.
    #[default]
    Single,
    /// Every mention word becomes its own `[MASK]`.
    PerToken,
}

/// Range of `window` consecutive positions with `center` as close to the
/// middle as the sequence bounds allow. Shorter sequences are returned whole.
pub fn window_range(len: usize, center: usize, window: usize) -> Range<usize> {
    if len <= window {
        return 0..len;
    }
    let start = center.saturating_sub(window / 2).min(len - window);
    start..start + window
}

pub fn window_context(token_ids: &[u32], center: usize, window: usize) -> Vec<u32> {
    token_ids[window_range(token_ids.len(), center, window)].to_vec()
}

/// Window around `center` shifted as little as needed to contain `keep`.
fn window_containing(len: usize, center: usize, window: usize, keep: Range<usize>) -> Range<usize> {
    let r = window_range(len, center, window);
    if len <= window {
        return r;
    }
    let mut start = r.start.min(keep.start);
    start = start.max(keep.end.saturating_sub(window));
    start = start.min(len - window);
    start..start + window
}

pub fn make_context(
    sentence_ids: &[u32],
    mention: (usize, usize),
    mask_rate: f64,
    max_len: usize,
    rng: &mut RngState,
) -> Result<Context> {
    make_context_with(sentence_ids, mention, mask_rate, max_len, MaskStyle::Single, rng)
}

/// Wrap the mention `[start, end)` in markers, masking it with probability
/// `mask_rate`, prepend `[CLS]`, and window to `max_len` around the mention.
/// Exactly one uniform draw is consumed per call.
pub fn make_context_with(
    sentence_ids: &[u32],
    mention: (usize, usize),
    mask_rate: f64,
    max_len: usize,
    style: MaskStyle,
    rng: &mut RngState,
) -> Result<Context> {
    let (start, end) = mention;
    if start >= end || end > sentence_ids.len() {
        return Err(RelicError::BadMention(format!(
            "mention {start}..{end} in sentence of {} tokens",
            sentence_ids.len()
        )));
    }
    if !(0.0..=1.0).contains(&mask_rate) {
        return Err(RelicError::InvalidArgument(format!("mask rate {mask_rate}")));
    }
    if max_len < 4 {
        return Err(RelicError::InvalidArgument(format!("max_len {max_len} < 4")));
    }
    let masked = rng.uniform() < mask_rate;
    let mut body = Vec::with_capacity(sentence_ids.len() + 2);
    body.extend_from_slice(&sentence_ids[..start]);
    body.push(ENT_START);
    if masked {
        match style {
            MaskStyle::Single => body.push(MASK),
            MaskStyle::PerToken => body.extend(std::iter::repeat_n(MASK, end - start)),
        }
    } else {
        body.extend_from_slice(&sentence_ids[start..end]);
    }
    let close = body.len();
    body.push(ENT_END);
    body.extend_from_slice(&sentence_ids[end..]);

    let window = max_len - 1;
    if close + 1 - start > window {
        return Err(RelicError::BadMention(format!(
            "mention of {} tokens does not fit in max_len {max_len}",
            close - start - 1
        )));
    }
    let center = start + 1 + (close - start - 1) / 2;
    let r = window_containing(body.len(), center, window, start..close + 1);
    let mut ids = Vec::with_capacity(r.len() + 1);
    ids.push(CLS);
    ids.extend_from_slice(&body[r]);
    Context::new(ids)
}

/// Linking input: `[CLS]`, the first `prefix` document tokens, and the
/// `prefix`-token window around the mention (overlap emitted once), with
/// the mention kept verbatim between markers. `budget` counts `[CLS]` plus
/// both token spans, so `prefix = (budget - 1) / 2`.
pub fn make_linking_context(doc_tokens: &[u32], mention: (usize, usize), budget: usize) -> Result<Context> {
    let (start, end) = mention;
    if start >= end || end > doc_tokens.len() {
        return Err(RelicError::BadMention(format!(
            "mention {start}..{end} in document of {} tokens",
            doc_tokens.len()
        )));
    }
    let span = (budget.saturating_sub(1) / 2).max(1);
    if end - start > span {
        return Err(RelicError::BadMention(format!(
            "mention of {} tokens exceeds window {span}",
            end - start
        )));
    }
    let center = start + (end - start - 1) / 2;
    let win = window_containing(doc_tokens.len(), center, span, start..end);
    let prefix_end = span.min(doc_tokens.len());
    let pieces: Vec<Range<usize>> = if win.start <= prefix_end {
        std::iter::once(0..prefix_end.max(win.end)).collect()
    } else {
        vec![0..prefix_end, win]
    };
    let mut ids = vec![CLS];
    for piece in pieces {
        for i in piece {
            if i == start {
                ids.push(ENT_START);
            }
            ids.push(doc_tokens[i]);
            if i + 1 == end {
                ids.push(ENT_END);
            }
        }
    }
    Context::new(ids)
}
