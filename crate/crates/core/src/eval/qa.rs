use std::collections::{BTreeMap, HashMap};

use log::info;
use serde::{Deserialize, Serialize};

use super::linking::retrieval_accuracy;
use crate::corpus::{Context, Example, QaRecord, Vocab};
use crate::error::{RelicError, Result};
use crate::neural::Tensor;
use crate::objective::{batch_score_matrix, candidate_score_matrix, nce_loss};
use crate::store::{AnnIndex, EmbeddingTable};
use crate::trainer::{finetune, Checkpoint, NegativeMode, TrainConfig};

/// Per query, the `k` nearest entity rows other than the gold row (or all
/// non-gold rows when the table is smaller).
pub fn mine_hard_negatives(
    index: &AnnIndex,
    table: &EmbeddingTable,
    queries: &Tensor<f32>,
    gold: &[usize],
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(RelicError::InvalidArgument("need at least one hard negative".into()));
    }
    if queries.rows() != gold.len() {
        return Err(RelicError::shape("mine_hard_negatives", format!("{} queries, {} golds", queries.rows(), gold.len())));
    }
    index.check_fresh(table)?;
    let mut out = Vec::with_capacity(gold.len());
    for (i, &g) in gold.iter().enumerate() {
        let found = index.search_rows(table, queries.row(i), k + 1)?;
        out.push(found.into_iter().map(|(r, _)| r).filter(|&r| r != g).take(k).collect());
    }
    Ok(out)
}

/// Question records as encoder inputs (no mention markers), truncated to
/// `max_len`. Returns the examples and the number of empty questions
/// skipped.
pub fn qa_examples(records: &[QaRecord], vocab: &Vocab, max_len: usize) -> Result<(Vec<Example>, usize)> {
    let mut out = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for r in records {
        let mut ids = vocab.tokenize(&r.question);
        if ids.is_empty() {
            skipped += 1;
            continue;
        }
        ids.truncate(max_len.saturating_sub(1));
        out.push(Example {
            context: Context::question(&ids)?,
            entity_id: r.answer_entity.clone(),
        });
    }
    Ok((out, skipped))
}

/// Top-1 retrieval exact match.
pub fn qa_exact_match(ckpt: &Checkpoint, dev: &[Example]) -> Result<f64> {
    if dev.is_empty() {
        return Err(RelicError::Empty("QA dev set is empty".into()));
    }
    retrieval_accuracy(ckpt, dev)
}

/// Mean eval-mode loss over consecutive full batches of `examples`, with
/// in-batch or mined hard negatives.
pub fn retrieval_loss(
    ckpt: &Checkpoint,
    examples: &[Example],
    mode: NegativeMode,
    batch_size: usize,
    num_negatives: usize,
) -> Result<f64> {
    let b = batch_size.min(examples.len());
    if b < 2 {
        return Err(RelicError::InvalidArgument("need at least two examples for a batch".into()));
    }
    let contexts: Vec<Context> = examples.iter().map(|e| e.context.clone()).collect();
    let g = ckpt.encode_all(&contexts)?;
    let rows: Vec<usize> = examples.iter().map(|e| ckpt.table.require(&e.entity_id)).collect::<Result<_>>()?;
    let negs = match mode {
        NegativeMode::Hard => {
            let mut ann = ckpt.config.ann.clone();
            ann.metric = ckpt.config.metric;
            let index = AnnIndex::build(&ckpt.table, &ann)?;
            Some(mine_hard_negatives(&index, &ckpt.table, &g, &rows, num_negatives)?)
        }
        NegativeMode::InBatch => None,
        NegativeMode::Noise => {
            return Err(RelicError::InvalidArgument("noise negatives have no fixed evaluation loss".into()))
        }
    };
    let d = ckpt.table.dim();
    let a = ckpt.scale();
    let mut total = 0.0;
    let mut batches = 0usize;
    for start in (0..examples.len() - b + 1).step_by(b) {
        let span = start..start + b;
        let gb = Tensor::from_vec(&[b, d], g.values()[start * d..(start + b) * d].to_vec())?;
        let sm = match &negs {
            None => {
                let f = gather(&ckpt.table, &rows[span.clone()]);
                batch_score_matrix(&gb, &f, a, &rows[span], ckpt.config.metric)?.0
            }
            Some(negs) => {
                let mut cols = Vec::new();
                let mut col_of = BTreeMap::new();
                let mut col = |r: usize, cols: &mut Vec<usize>| {
                    *col_of.entry(r).or_insert_with(|| {
                        cols.push(r);
                        cols.len() - 1
                    })
                };
                let targets: Vec<usize> = rows[span.clone()].iter().map(|&r| col(r, &mut cols)).collect();
                let allowed: Vec<Vec<usize>> = span.clone().map(|i| negs[i].iter().map(|&r| col(r, &mut cols)).collect()).collect();
                let f = gather(&ckpt.table, &cols);
                candidate_score_matrix(&gb, &f, a, targets, &allowed, ckpt.config.metric)?.0
            }
        };
        total += nce_loss(&sm).loss as f64;
        batches += 1;
    }
    Ok(total / batches as f64)
}

fn gather(table: &EmbeddingTable, rows: &[usize]) -> Tensor<f32> {
    let d = table.dim();
    let mut v = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        v.extend_from_slice(table.row(r));
    }
    Tensor::from_vec(&[rows.len(), d], v).expect("rows x d")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaConfig {
    pub round1: TrainConfig,
    pub round2: TrainConfig,
}

impl Default for QaConfig {
    fn default() -> Self {
        let round1 = TrainConfig {
            total_steps: 500,
            mask_rate: 0.0,
            freeze_table: true,
            negatives: NegativeMode::InBatch,
            ..TrainConfig::default()
        };
        let round2 = TrainConfig {
            total_steps: 200,
            negatives: NegativeMode::Hard,
            num_negatives: 128,
            ..round1.clone()
        };
        QaConfig { round1, round2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QaReport {
    pub em_before: f64,
    pub em_round1: f64,
    pub em_round2: f64,
    /// Eval-mode in-batch loss on the training questions after round 1.
    pub round1_final_loss: f64,
    /// Eval-mode hard-negative loss on the same checkpoint.
    pub round2_initial_loss: f64,
    /// Mined negative lists that contained the gold answer (always 0).
    pub gold_in_negatives: usize,
    pub train_size: usize,
    pub dev_size: usize,
}

/// Two fine-tuning rounds on (question, answer) pairs with the entity table
/// frozen: in-batch negatives, then mined hard negatives. Exact match is
/// measured on `dev` before and after each round.
pub fn qa_pipeline(ckpt: &mut Checkpoint, train: &[Example], dev: &[Example], config: &QaConfig) -> Result<QaReport> {
    if dev.is_empty() {
        return Err(RelicError::Empty("QA dev set is empty".into()));
    }
    let em_before = qa_exact_match(ckpt, dev)?;
    info!("QA exact match before fine-tuning: {em_before:.3}");
    finetune(ckpt, train, &config.round1, None)?;
    let em_round1 = qa_exact_match(ckpt, dev)?;
    info!("QA exact match after round 1: {em_round1:.3}");
    let r2 = &config.round2;
    let round1_final_loss = retrieval_loss(ckpt, train, NegativeMode::InBatch, config.round1.batch_size, 0)?;
    let round2_initial_loss = retrieval_loss(ckpt, train, NegativeMode::Hard, r2.batch_size, r2.num_negatives)?;

    let contexts: Vec<Context> = train.iter().map(|e| e.context.clone()).collect();
    let g = ckpt.encode_all(&contexts)?;
    let rows: Vec<usize> = train.iter().map(|e| ckpt.table.require(&e.entity_id)).collect::<Result<_>>()?;
    let mut ann = ckpt.config.ann.clone();
    ann.metric = ckpt.config.metric;
    let index = AnnIndex::build(&ckpt.table, &ann)?;
    let mined = mine_hard_negatives(&index, &ckpt.table, &g, &rows, r2.num_negatives)?;
    let gold_in_negatives = mined.iter().zip(&rows).filter(|(n, g)| n.contains(g)).count();

    finetune(ckpt, train, r2, None)?;
    let em_round2 = qa_exact_match(ckpt, dev)?;
    info!("QA exact match after round 2: {em_round2:.3}");
    Ok(QaReport {
        em_before,
        em_round1,
        em_round2,
        round1_final_loss,
        round2_initial_loss,
        gold_in_negatives,
        train_size: train.len(),
        dev_size: dev.len(),
    })
}

/// Exact lowercase match of answer strings against entity titles
/// (`title → entity id`). Returns the linked ids and the fraction skipped.
pub fn link_answer_strings(answers: &[String], titles: &HashMap<String, String>) -> (Vec<Option<String>>, f64) {
    let lower: HashMap<String, &String> = titles.iter().map(|(t, id)| (t.to_lowercase(), id)).collect();
    let linked: Vec<Option<String>> = answers
        .iter()
        .map(|a| lower.get(&a.trim().to_lowercase()).map(|id| (*id).clone()))
        .collect();
    let skipped = linked.iter().filter(|l| l.is_none()).count();
    let rate = if answers.is_empty() { 0.0 } else { skipped as f64 / answers.len() as f64 };
    (linked, rate)
}
