use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{RelicError, Result};
use crate::neural::{NamedTensors, Tensor};

/// Linear ramp from 0 to `max_lr` over the first `warmup_frac` of the run,
/// then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, max_lr: f64, warmup_frac: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let total = total_steps as f64;
    let warm = warmup_frac * total;
    let s = step as f64;
    if s < warm {
        max_lr * s / warm
    } else {
        max_lr * (total - s) / (total - warm)
    }
}

/// Scale every gradient by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f32]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| (*x as f64) * (*x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update at (1-based) step `t`.
pub fn adam_update(values: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], lr: f64, t: u64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..values.len() {
        let g = grad[i] as f64;
        let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let upd = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        values[i] = (values[i] as f64 - upd) as f32;
    }
}

/// Adam moments: dense for encoder tensors (in named-tensor order), sparse
/// for entity rows, which only exist once a row has received a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub dense: Vec<(Vec<f32>, Vec<f32>)>,
    pub rows: BTreeMap<u32, (Vec<f32>, Vec<f32>)>,
}

impl OptState {
    pub fn new(params: &EncoderParams<f32>) -> Self {
        OptState {
            step: 0,
            dense: params
                .named_tensors()
                .iter()
                .map(|(_, t)| (vec![0.0; t.len()], vec![0.0; t.len()]))
                .collect(),
            rows: BTreeMap::new(),
        }
    }

    /// Dense moments of each trainable tensor and its gradient.
    pub fn step_dense(&mut self, params: &mut EncoderParams<f32>, lr: f64, cfg: &AdamConfig) -> Result<()> {
        let t = self.step;
        for ((name, tensor), (m, v)) in params.named_tensors_mut().into_iter().zip(&mut self.dense) {
            if tensor.grad().is_none() {
                continue;
            }
            let (values, grad) = tensor.values_and_grad_mut();
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(RelicError::NonFinite(name));
            }
            adam_update(values, grad, m, v, lr, t, cfg);
        }
        Ok(())
    }

    pub fn step_row(&mut self, row: usize, values: &mut [f32], grad: &[f32], lr: f64, cfg: &AdamConfig) -> Result<()> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(RelicError::NonFinite(format!("entity row {row}")));
        }
        let d = values.len();
        let (m, v) = self.rows.entry(row as u32).or_insert_with(|| (vec![0.0; d], vec![0.0; d]));
        adam_update(values, grad, m, v, lr, self.step, cfg);
        Ok(())
    }

    /// Tensors for the checkpoint container. Row indices are stored as the
    /// raw bits of u32 values.
    pub fn to_named(&self, params: &EncoderParams<f32>) -> NamedTensors {
        let mut out = vec![("opt.step".to_string(), Tensor::scalar(f32::from_bits(self.step as u32)))];
        for ((name, t), (m, v)) in params.named_tensors().into_iter().zip(&self.dense) {
            out.push((format!("opt.m.{name}"), Tensor::from_vec(t.dims(), m.clone()).expect("same shape")));
            out.push((format!("opt.v.{name}"), Tensor::from_vec(t.dims(), v.clone()).expect("same shape")));
        }
        let d = params.config.output_dim;
        let n = self.rows.len();
        let ids = self.rows.keys().map(|r| f32::from_bits(*r)).collect();
        let (mut m, mut v) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d));
        for (rm, rv) in self.rows.values() {
            m.extend_from_slice(rm);
            v.extend_from_slice(rv);
        }
        out.push(("opt.rows".into(), Tensor::from_vec(&[n], ids).expect("length n")));
        out.push(("opt.rows.m".into(), Tensor::from_vec(&[n, d], m).expect("n x d")));
        out.push(("opt.rows.v".into(), Tensor::from_vec(&[n, d], v).expect("n x d")));
        out
    }

    pub fn from_named(params: &EncoderParams<f32>, named: &NamedTensors) -> Result<Self> {
        let find = |n: &str| {
            named
                .iter()
                .find(|(k, _)| k == n)
                .map(|(_, t)| t)
                .ok_or_else(|| RelicError::Format(format!("checkpoint lacks `{n}`")))
        };
        let mut state = OptState::new(params);
        state.step = find("opt.step")?.item().to_bits() as u64;
        for ((name, t), slot) in params.named_tensors().into_iter().zip(&mut state.dense) {
            let m = find(&format!("opt.m.{name}"))?;
            let v = find(&format!("opt.v.{name}"))?;
            if m.len() != t.len() || v.len() != t.len() {
                return Err(RelicError::Format(format!("optimizer moments for `{name}` have the wrong size")));
            }
            *slot = (m.values().to_vec(), v.values().to_vec());
        }
        let rows = find("opt.rows")?;
        let (m, v) = (find("opt.rows.m")?, find("opt.rows.v")?);
        let d = params.config.output_dim;
        if m.len() != rows.len() * d || v.len() != rows.len() * d {
            return Err(RelicError::Format("sparse optimizer moments have the wrong size".into()));
        }
        for (i, r) in rows.values().iter().enumerate() {
            let span = i * d..(i + 1) * d;
            state
                .rows
                .insert(r.to_bits(), (m.values()[span.clone()].to_vec(), v.values()[span].to_vec()));
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0, 1000, 2e-3, 0.1), 0.0);
        assert_eq!(lr_schedule(100, 1000, 2e-3, 0.1), 2e-3);
        assert!((lr_schedule(550, 1000, 2e-3, 0.1) - 1e-3).abs() < 1e-15);
        assert!((lr_schedule(50, 1000, 2e-3, 0.1) - 1e-3).abs() < 1e-15);
        assert_eq!(lr_schedule(1000, 1000, 2e-3, 0.1), 0.0);
        let peak = (0..=1000).map(|s| lr_schedule(s, 1000, 2e-3, 0.1)).fold(0.0, f64::max);
        assert_eq!(peak, 2e-3);
    }

    #[test]
    fn clipping_examples() {
        let mut a = vec![0.3f32, 0.4];
        assert!((clip_global_norm(&mut [&mut a], 1.0) - 0.5).abs() < 1e-7);
        assert_eq!(a, vec![0.3, 0.4]);
        let mut a = vec![3.0f32, 4.0];
        clip_global_norm(&mut [&mut a], 1.0);
        assert!((a[0] - 0.6).abs() < 1e-7 && (a[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn adam_single_step() {
        let cfg = AdamConfig::default();
        let (mut p, mut m, mut v) = (vec![0.5f32], vec![0.0f32], vec![0.0f32]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1e-2, 1, &cfg);
        let expect = 0.5 - 1e-2 / (1.0 + 1e-8);
        assert!((p[0] as f64 - expect).abs() < 1e-7);
        assert!((m[0] - 0.1).abs() < 1e-7 && (v[0] - 0.001).abs() < 1e-9);

        let (mut p, mut m, mut v) = (vec![0.5f32], vec![0.2f32], vec![0.01f32]);
        adam_update(&mut p, &[0.0], &mut m, &mut v, 0.0, 3, &cfg);
        assert_eq!(p, vec![0.5]);
        assert!((m[0] - 0.18).abs() < 1e-7 && (v[0] - 0.00999).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn clipped_norm_bounded(g in proptest::collection::vec(-50.0f32..50.0, 1..40), max in 0.01f64..10.0) {
            let mut g = g;
            let half = g.len() / 2;
            let (a, b) = g.split_at_mut(half);
            clip_global_norm(&mut [a, b], max);
            let n = g.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!(n <= max + 1e-6);
        }

        #[test]
        fn schedule_is_piecewise_linear(total in 10usize..5000, frac in 0.0f64..0.9) {
            let max = 3e-4;
            for s in 0..total {
                let lr = lr_schedule(s, total, max, frac);
                prop_assert!((0.0..=max * (1.0 + 1e-12)).contains(&lr));
                let next = lr_schedule(s + 1, total, max, frac);
                prop_assert!((next - lr).abs() <= max / (frac * total as f64).max(1.0).min((1.0 - frac) * total as f64) + 1e-12);
            }
        }
    }
}
