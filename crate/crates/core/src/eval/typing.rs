use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{per_type_map, typing_metrics, TypingMetrics};
use crate::corpus::TypingRecord;
use crate::error::{RelicError, Result};
use crate::neural::{
    dropout, dropout_backward, init_trunc_normal, linear, linear_backward, relu, relu_backward, Mode, RngState,
    Tensor,
};
use crate::store::EmbeddingTable;
use crate::trainer::{adam_update, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    /// Keep-probability for dropout on the input and the hidden units.
    pub keep_prob: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validation checks (one per epoch) without improvement before
    /// stopping.
    pub patience: usize,
    pub threshold: f64,
    /// Cross-validation folds; every labeled entity is scored once.
    pub folds: usize,
    /// Fraction of each training fold held out for early stopping.
    pub valid_frac: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 500,
            keep_prob: 0.5,
            lr: 1e-4,
            batch_size: 256,
            max_epochs: 2000,
            patience: 10,
            threshold: 0.5,
            folds: 5,
            valid_frac: 0.1,
            seed: 0,
        }
    }
}

/// Two-layer classifier over L2-normalized, frozen entity vectors:
/// `σ(W2 · ReLU(W1 · ĥ + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TypingProbe {
    pub w1: Tensor<f32>,
    pub b1: Tensor<f32>,
    pub w2: Tensor<f32>,
    pub b2: Tensor<f32>,
}

impl TypingProbe {
    /// `W1` random with std `1/sqrt(d)`, everything else zero, so an
    /// untrained probe outputs 0.5 for every type.
    pub fn init(d: usize, hidden: usize, n_types: usize, rng: &mut RngState) -> Self {
        TypingProbe {
            w1: init_trunc_normal(&[hidden, d], 1.0 / (d as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[n_types, hidden]),
            b2: Tensor::zeros(&[n_types]),
        }
    }

    pub fn n_types(&self) -> usize {
        self.b2.len()
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<f32>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn normalized(h: &[f32]) -> Result<Vec<f32>> {
    let n = h.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(RelicError::ZeroNorm("typing probe input"));
    }
    Ok(h.iter().map(|x| (*x as f64 / n) as f32).collect())
}

struct ProbePass {
    x: Tensor<f32>,
    pre: Tensor<f32>,
    hid_mask: crate::neural::DropoutMask<f32>,
    hid: Tensor<f32>,
    logits: Tensor<f32>,
}

fn pass(probe: &TypingProbe, x: &Tensor<f32>, keep: f64, mode: Mode, rng: &mut RngState) -> Result<ProbePass> {
    let (xd, _) = dropout(x, keep, mode, rng);
    let pre = linear(&xd, &probe.w1, Some(&probe.b1))?;
    let (hid, hid_mask) = dropout(&relu(&pre), keep, mode, rng);
    let logits = linear(&hid, &probe.w2, Some(&probe.b2))?;
    Ok(ProbePass {
        x: xd,
        pre,
        hid_mask,
        hid,
        logits,
    })
}

/// Type probabilities for one (unnormalized) entity vector.
pub fn probe_forward(probe: &TypingProbe, h: &[f32]) -> Result<Vec<f64>> {
    let x = Tensor::from_vec(&[1, h.len()], normalized(h)?)?;
    let p = pass(probe, &x, 1.0, Mode::Eval, &mut RngState::new(0))?;
    Ok(p.logits.values().iter().map(|z| sigmoid(*z as f64)).collect())
}

/// Labeled entities resolved against a table.
#[derive(Clone, Debug)]
pub struct TypingData {
    pub types: Vec<String>,
    pub entities: Vec<String>,
    /// L2-normalized entity rows, one per labeled entity.
    pub inputs: Tensor<f32>,
    pub gold: Vec<Vec<usize>>,
}

/// Build the type vocabulary (sorted) and normalized inputs. Every labeled
/// entity must be in the table; the error lists the missing ones.
pub fn typing_data(table: &EmbeddingTable, labels: &[TypingRecord]) -> Result<TypingData> {
    if labels.is_empty() {
        return Err(RelicError::Empty("no typing labels".into()));
    }
    let missing: Vec<String> = labels
        .iter()
        .filter(|l| table.index_of(&l.entity_id).is_none())
        .map(|l| l.entity_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(RelicError::MissingIds(missing));
    }
    let mut type_index = BTreeMap::new();
    for l in labels {
        for t in &l.types {
            type_index.insert(t.clone(), 0);
        }
    }
    for (i, v) in type_index.values_mut().enumerate() {
        *v = i;
    }
    let d = table.dim();
    let mut inputs = Vec::with_capacity(labels.len() * d);
    let mut gold = Vec::with_capacity(labels.len());
    for l in labels {
        inputs.extend(normalized(table.vector(&l.entity_id).expect("checked"))?);
        let mut g: Vec<usize> = l.types.iter().map(|t| type_index[t]).collect();
        g.sort_unstable();
        g.dedup();
        gold.push(g);
    }
    Ok(TypingData {
        types: type_index.into_keys().collect(),
        entities: labels.iter().map(|l| l.entity_id.clone()).collect(),
        inputs: Tensor::from_vec(&[labels.len(), d], inputs)?,
        gold,
    })
}

fn subset(data: &TypingData, idx: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
    let (d, t) = (data.inputs.cols(), data.types.len());
    let mut x = Vec::with_capacity(idx.len() * d);
    let mut y = vec![0.0f32; idx.len() * t];
    for (r, &i) in idx.iter().enumerate() {
        x.extend_from_slice(data.inputs.row(i));
        for &g in &data.gold[i] {
            y[r * t + g] = 1.0;
        }
    }
    (
        Tensor::from_vec(&[idx.len(), d], x).expect("n x d"),
        Tensor::from_vec(&[idx.len(), t], y).expect("n x t"),
    )
}

/// Summed-over-types binary cross-entropy, averaged over rows.
fn bce(logits: &Tensor<f32>, y: &Tensor<f32>) -> f64 {
    let n = logits.rows().max(1) as f64;
    logits
        .values()
        .iter()
        .zip(y.values())
        .map(|(z, t)| {
            let (z, t) = (*z as f64, *t as f64);
            z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / n
}

/// Train on rows `train`, early-stopping on the loss over rows `valid`
/// (no early stop when `valid` is empty). Inputs are never modified.
pub fn train_probe(data: &TypingData, train: &[usize], valid: &[usize], config: &ProbeConfig) -> Result<TypingProbe> {
    let root = RngState::new(config.seed);
    let mut probe = TypingProbe::init(data.inputs.cols(), config.hidden, data.types.len(), &mut root.derive(1));
    if train.is_empty() || config.max_epochs == 0 {
        return Ok(probe);
    }
    let adam = AdamConfig::default();
    let mut moments: Vec<(Vec<f32>, Vec<f32>)> = probe
        .tensors_mut()
        .iter()
        .map(|t| (vec![0.0; t.len()], vec![0.0; t.len()]))
        .collect();
    let (vx, vy) = subset(data, valid);
    let mut order = train.to_vec();
    let mut shuffle_rng = root.derive(2);
    let mut drop_rng = root.derive(3);
    let mut step = 0u64;
    let mut best = (f64::INFINITY, probe.clone());
    let mut since_best = 0;
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let (x, y) = subset(data, chunk);
            let p = pass(&probe, &x, config.keep_prob, Mode::Train, &mut drop_rng)?;
            let n = chunk.len() as f32;
            let mut dz = p.logits.clone();
            for (g, t) in dz.values_mut().iter_mut().zip(y.values()) {
                *g = (sigmoid(*g as f64) as f32 - t) / n;
            }
            let dh = linear_backward(&p.hid, &mut probe.w2, Some(&mut probe.b2), &dz)?;
            let dh = dropout_backward(&p.hid_mask, &dh);
            let dpre = relu_backward(&p.pre, &dh)?;
            linear_backward(&p.x, &mut probe.w1, Some(&mut probe.b1), &dpre)?;
            step += 1;
            for (t, (m, v)) in probe.tensors_mut().into_iter().zip(&mut moments) {
                let (values, grad) = t.values_and_grad_mut();
                adam_update(values, grad, m, v, config.lr, step, &adam);
                t.clear_grad();
            }
        }
        if valid.is_empty() {
            continue;
        }
        let vp = pass(&probe, &vx, 1.0, Mode::Eval, &mut drop_rng)?;
        let loss = bce(&vp.logits, &vy);
        if loss < best.0 {
            best = (loss, probe.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                debug!("probe early stop after epoch {epoch}, best validation loss {:.4}", best.0);
                break;
            }
        }
    }
    Ok(if valid.is_empty() { probe } else { best.1 })
}

#[derive(Clone, Debug, Serialize)]
pub struct TypingEval {
    pub metrics: TypingMetrics,
    pub per_type_map: f64,
    pub entities: usize,
    pub types: usize,
    pub folds: usize,
}

/// Cross-validated probe evaluation: each fold trains on the others (with
/// a validation slice for early stopping) and predicts its own entities.
pub fn evaluate_typing(table: &EmbeddingTable, labels: &[TypingRecord], config: &ProbeConfig) -> Result<TypingEval> {
    let data = typing_data(table, labels)?;
    let n = data.entities.len();
    let folds = config.folds.clamp(2, n.max(2));
    if n < 2 {
        return Err(RelicError::InvalidArgument("typing evaluation needs at least two entities".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngState::new(config.seed).derive(7));
    let mut preds = vec![Vec::new(); n];
    for f in 0..folds {
        let test: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % folds == f).map(|(_, &e)| e).collect();
        let rest: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % folds != f).map(|(_, &e)| e).collect();
        let n_valid = ((rest.len() as f64) * config.valid_frac).round() as usize;
        let (valid, train) = rest.split_at(n_valid.min(rest.len().saturating_sub(1)));
        let mut cfg = config.clone();
        cfg.seed = config.seed.wrapping_add(f as u64);
        let probe = train_probe(&data, train, valid, &cfg)?;
        for &e in &test {
            preds[e] = probe_forward(&probe, data.inputs.row(e))?;
        }
    }
    let metrics = typing_metrics(&preds, &data.gold, config.threshold)?;
    let per_type = per_type_map(&preds, &data.gold)?;
    info!(
        "typing: P@1 {:.3} acc {:.3} micro-F1 {:.3} MAP {:.3}",
        metrics.p_at_1, metrics.accuracy, metrics.micro_f1, metrics.map
    );
    Ok(TypingEval {
        metrics,
        per_type_map: per_type,
        entities: n,
        types: data.types.len(),
        folds,
    })
}
