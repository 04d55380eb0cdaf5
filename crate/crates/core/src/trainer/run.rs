use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::Serialize;

use super::{lr_schedule, Checkpoint, NegativeMode, OptState, TrainConfig};
use crate::corpus::{make_context, Context, Example, MentionRecord};
use crate::encoder::{backward, forward};
use crate::error::{RelicError, Result};
use crate::eval::mine_hard_negatives;
use crate::neural::{Mode, RngState, Tensor};
use crate::objective::{batch_score_matrix, candidate_score_matrix, in_batch_metrics, nce_loss, score_backward};
use crate::objective::{sample_noise_negatives, ScoreCache, ScoreMatrix};
use crate::store::AnnIndex;

/// Training pairs: raw mentions are re-masked every epoch, prepared
/// examples are used as given.
#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    Mentions(&'a [MentionRecord]),
    Examples(&'a [Example]),
}

impl TrainData<'_> {
    fn len(&self) -> usize {
        match self {
            TrainData::Mentions(m) => m.len(),
            TrainData::Examples(e) => e.len(),
        }
    }

    fn entity(&self, i: usize) -> &str {
        match self {
            TrainData::Mentions(m) => &m[i].entity_id,
            TrainData::Examples(e) => &e[i].entity_id,
        }
    }
}

/// Metrics averaged over the steps since the previous log line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub mean_rank: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&StepMetrics> {
        self.metrics.last()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| RelicError::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| RelicError::io(path, e);
        writeln!(w, "step,lr,loss,mean_rank,accuracy").map_err(io)?;
        for m in &self.metrics {
            writeln!(w, "{},{},{},{},{}", m.step, m.lr, m.loss, m.mean_rank, m.accuracy).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

struct Batch {
    contexts: Vec<Context>,
    rows: Vec<usize>,
    negatives: Option<Vec<Vec<usize>>>,
}

struct StepStats {
    loss: f64,
    mean_rank: f64,
    accuracy: f64,
}

const METRICS_FILE: &str = "metrics.csv";

/// Run `config.total_steps` updates of `ckpt` on `data`, using the
/// checkpoint's own config. With `out`, checkpoints (at the configured
/// interval and at the end) and `metrics.csv` are written there.
pub fn train(ckpt: &mut Checkpoint, data: TrainData<'_>, out: Option<&Path>) -> Result<TrainReport> {
    let cfg = ckpt.config.clone();
    cfg.validate()?;
    let n = data.len();
    let rows: Vec<usize> = (0..n).map(|i| ckpt.table.require(data.entity(i))).collect::<Result<_>>()?;
    let mut report = TrainReport::default();
    if cfg.total_steps == 0 {
        finish(ckpt, &report, out)?;
        return Ok(report);
    }
    if n < cfg.batch_size {
        return Err(RelicError::InvalidArgument(format!(
            "{n} training pairs cannot fill one batch of {}",
            cfg.batch_size
        )));
    }
    let root = RngState::new(cfg.seed);
    let mut dropout_rng = root.derive(10);
    let mut noise_rng = root.derive(11);
    let hard = match cfg.negatives {
        NegativeMode::Hard => Some(mine_for(ckpt, data, &rows)?),
        _ => None,
    };
    let noise_weights: Vec<f64> = match ckpt.table.frequency() {
        Some(f) => f.iter().map(|c| *c as f64).collect(),
        None => vec![1.0; ckpt.table.len()],
    };
    let per_epoch = n / cfg.batch_size;
    let mut order: Vec<usize> = (0..n).collect();
    let mut mask_rng = root.derive(12);
    let (mut acc_loss, mut acc_rank, mut acc_top, mut acc_n) = (0.0, 0.0, 0.0, 0usize);
    for step in 0..cfg.total_steps {
        let epoch = step / per_epoch;
        let slot = step % per_epoch;
        if slot == 0 {
            order.sort_unstable();
            order.shuffle(&mut root.derive(1000 + epoch as u64));
            mask_rng = root.derive(1_000_000 + epoch as u64);
        }
        let picked = &order[slot * cfg.batch_size..(slot + 1) * cfg.batch_size];
        let mut contexts = Vec::with_capacity(picked.len());
        for &i in picked {
            contexts.push(match data {
                TrainData::Mentions(m) => make_context(
                    &m[i].tokens,
                    m[i].mention,
                    cfg.mask_rate,
                    cfg.encoder.max_len,
                    &mut mask_rng,
                )?,
                TrainData::Examples(e) => e[i].context.clone(),
            });
        }
        let batch_rows: Vec<usize> = picked.iter().map(|&i| rows[i]).collect();
        let negatives = match cfg.negatives {
            NegativeMode::InBatch => None,
            NegativeMode::Hard => Some(picked.iter().map(|&i| hard.as_ref().unwrap()[i].clone()).collect()),
            NegativeMode::Noise => {
                let mut lists = Vec::with_capacity(picked.len());
                for &r in &batch_rows {
                    let draws = sample_noise_negatives(&noise_weights, cfg.num_negatives, &mut noise_rng)?;
                    lists.push(draws.into_iter().filter(|&d| d != r).collect());
                }
                Some(lists)
            }
        };
        let batch = Batch {
            contexts,
            rows: batch_rows,
            negatives,
        };
        let lr = lr_schedule(step, cfg.total_steps, cfg.max_lr, cfg.warmup_frac);
        let stats = train_step(ckpt, &batch, lr, &mut dropout_rng)?;
        acc_loss += stats.loss;
        acc_rank += stats.mean_rank;
        acc_top += stats.accuracy;
        acc_n += 1;
        let done = step + 1;
        if done % cfg.log_interval == 0 || done == cfg.total_steps {
            let k = acc_n as f64;
            let m = StepMetrics {
                step: done,
                lr,
                loss: acc_loss / k,
                mean_rank: acc_rank / k,
                accuracy: acc_top / k,
            };
            info!(
                "step {} lr {:.3e} loss {:.4} mean_rank {:.2} accuracy {:.3}",
                m.step, m.lr, m.loss, m.mean_rank, m.accuracy
            );
            report.metrics.push(m);
            (acc_loss, acc_rank, acc_top, acc_n) = (0.0, 0.0, 0.0, 0);
            check_finite(ckpt)?;
        }
        if let Some(dir) = out {
            if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done != cfg.total_steps {
                finish(ckpt, &report, Some(dir))?;
            }
        }
    }
    finish(ckpt, &report, out)?;
    Ok(report)
}

/// Continue training a loaded checkpoint on prepared examples with the
/// training fields of `config` (the encoder architecture is kept). The
/// optimizer state starts fresh.
pub fn finetune(ckpt: &mut Checkpoint, examples: &[Example], config: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    let mut cfg = config.clone();
    cfg.encoder = ckpt.config.encoder.clone();
    cfg.max_vocab = ckpt.config.max_vocab;
    ckpt.config = cfg;
    ckpt.opt = OptState::new(&ckpt.encoder);
    train(ckpt, TrainData::Examples(examples), out)
}

fn finish(ckpt: &Checkpoint, report: &TrainReport, out: Option<&Path>) -> Result<()> {
    if let Some(dir) = out {
        ckpt.save(dir)?;
        report.write_csv(&dir.join(METRICS_FILE))?;
    }
    Ok(())
}

fn check_finite(ckpt: &Checkpoint) -> Result<()> {
    for (name, t) in ckpt.encoder.named_tensors() {
        if !t.is_finite() {
            return Err(RelicError::NonFinite(name));
        }
    }
    if !ckpt.table.vectors().is_finite() {
        return Err(RelicError::NonFinite("entity table".into()));
    }
    Ok(())
}

fn mine_for(ckpt: &Checkpoint, data: TrainData<'_>, rows: &[usize]) -> Result<Vec<Vec<usize>>> {
    let TrainData::Examples(examples) = data else {
        return Err(RelicError::InvalidArgument(
            "hard negatives are mined for prepared examples, not raw mentions".into(),
        ));
    };
    let contexts: Vec<Context> = examples.iter().map(|e| e.context.clone()).collect();
    let queries = ckpt.encode_all(&contexts)?;
    let mut ann = ckpt.config.ann.clone();
    ann.metric = ckpt.config.metric;
    let index = AnnIndex::build(&ckpt.table, &ann)?;
    let negs = mine_hard_negatives(&index, &ckpt.table, &queries, rows, ckpt.config.num_negatives)?;
    if negs.iter().any(Vec::is_empty) {
        warn!("some examples have no hard negatives; the table holds a single entity");
    }
    Ok(negs)
}

fn gather(ckpt: &Checkpoint, rows: &[usize]) -> Tensor<f32> {
    let d = ckpt.table.dim();
    let mut v = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        v.extend_from_slice(ckpt.table.row(r));
    }
    Tensor::from_vec(&[rows.len(), d], v).expect("rows x d")
}

fn score_batch(
    ckpt: &Checkpoint,
    batch: &Batch,
    g: &Tensor<f32>,
) -> Result<(Vec<usize>, ScoreMatrix<f32>, ScoreCache<f32>)> {
    let a = ckpt.scale();
    let metric = ckpt.config.metric;
    match &batch.negatives {
        None => {
            let f = gather(ckpt, &batch.rows);
            let (sm, cache) = batch_score_matrix(g, &f, a, &batch.rows, metric)?;
            Ok((batch.rows.clone(), sm, cache))
        }
        Some(negs) => {
            let mut cols: Vec<usize> = Vec::new();
            let mut col_of = BTreeMap::new();
            let mut col = |r: usize, cols: &mut Vec<usize>| {
                *col_of.entry(r).or_insert_with(|| {
                    cols.push(r);
                    cols.len() - 1
                })
            };
            let targets: Vec<usize> = batch.rows.iter().map(|&r| col(r, &mut cols)).collect();
            let allowed: Vec<Vec<usize>> = negs
                .iter()
                .zip(&batch.rows)
                .map(|(list, &gold)| list.iter().filter(|&&r| r != gold).map(|&r| col(r, &mut cols)).collect())
                .collect();
            let f = gather(ckpt, &cols);
            let (sm, cache) = candidate_score_matrix(g, &f, a, targets, &allowed, metric)?;
            Ok((cols, sm, cache))
        }
    }
}

fn train_step(ckpt: &mut Checkpoint, batch: &Batch, lr: f64, rng: &mut RngState) -> Result<StepStats> {
    let cfg = ckpt.config.clone();
    let b = batch.contexts.len();
    let d = cfg.encoder.output_dim;
    let mut g = Tensor::zeros(&[b, d]);
    let mut caches = Vec::with_capacity(b);
    for (i, c) in batch.contexts.iter().enumerate() {
        let ids = c.token_ids();
        let (v, cache) = forward(&ckpt.encoder, ids, ids.len(), Mode::Train, rng)?;
        g.row_mut(i).copy_from_slice(&v);
        caches.push(cache);
    }
    let (cols, sm, score_cache) = score_batch(ckpt, batch, &g)?;
    let out = nce_loss(&sm);
    let (mean_rank, accuracy) = in_batch_metrics(&sm);
    let grads = score_backward(&score_cache, &out.grad)?;

    if !cfg.freeze_encoder {
        ckpt.encoder.zero_grad();
        for (i, cache) in caches.iter().enumerate() {
            backward(&mut ckpt.encoder, cache, grads.d_g.row(i))?;
        }
        ckpt.encoder.scale_a.grad_mut()[0] += grads.d_a;
    }
    let mut row_grads: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
    if !cfg.freeze_table {
        for (j, &r) in cols.iter().enumerate() {
            let acc = row_grads.entry(r).or_insert_with(|| vec![0.0; d]);
            for (a, x) in acc.iter_mut().zip(grads.d_f.row(j)) {
                *a += *x;
            }
        }
    }

    let mut slices: Vec<&mut [f32]> = Vec::new();
    let mut enc_tensors = ckpt.encoder.named_tensors_mut();
    if !cfg.freeze_encoder {
        for (_, t) in enc_tensors.iter_mut() {
            slices.push(t.grad_mut());
        }
    }
    for gr in row_grads.values_mut() {
        slices.push(gr.as_mut_slice());
    }
    super::clip_global_norm(&mut slices, cfg.clip_norm);
    drop(slices);
    drop(enc_tensors);

    ckpt.opt.step += 1;
    if !cfg.freeze_encoder {
        ckpt.opt.step_dense(&mut ckpt.encoder, lr, &cfg.adam)?;
    }
    for (r, gr) in &row_grads {
        let values = ckpt.table.row_mut(*r);
        ckpt.opt.step_row(*r, values, gr, lr, &cfg.adam)?;
    }
    ckpt.encoder.clear_grad();
    Ok(StepStats {
        loss: out.loss as f64,
        mean_rank,
        accuracy,
    })
}
