//! Context encoder: token + position embeddings, pre-norm transformer
//! blocks, the hidden state at position 0 (`[CLS]`), and a linear
//! projection into the entity space.
//!
//! The last block only computes its output for position 0; earlier blocks
//! run over the whole sequence. Padding positions never act as attention
//! keys, so a padded batch row encodes exactly like the unpadded context.

use serde::{Deserialize, Serialize};

use crate::corpus::{Context, PAD};
use crate::error::{RelicError, Result};
use crate::neural::{
    dropout, dropout_backward, embedding_backward, embedding_lookup, gelu, gelu_backward, init_trunc_normal,
    layer_norm, layer_norm_backward, linear, linear_backward, multi_head_attention,
    multi_head_attention_backward, AttentionCache, AttentionParams, DropoutMask, LayerNormCache, Mode,
    NamedTensors, RngState, Scalar, Tensor,
};

pub const INIT_STD: f64 = 0.02;
pub const INIT_SCALE: f64 = 16.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_size: usize,
    pub output_dim: usize,
    /// Dropout keep-probability; 1.0 disables dropout.
    pub keep_prob: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            max_len: 64,
            hidden: 64,
            layers: 2,
            heads: 4,
            ff_size: 256,
            output_dim: 32,
            keep_prob: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RelicError::InvalidArgument(m));
        if self.vocab_size < crate::corpus::RESERVED.len() {
            return bad(format!("vocab_size {} is below the reserved tokens", self.vocab_size));
        }
        if self.max_len < 3 {
            return bad(format!("max_len {} < 3", self.max_len));
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide hidden {}", self.heads, self.hidden));
        }
        if self.output_dim == 0 || self.ff_size == 0 {
            return bad("output_dim and ff_size must be positive".into());
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad(format!("keep_prob {} outside (0, 1]", self.keep_prob));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F: Scalar> {
    pub ln1_gamma: Tensor<F>,
    pub ln1_beta: Tensor<F>,
    pub attn: AttentionParams<F>,
    pub ln2_gamma: Tensor<F>,
    pub ln2_beta: Tensor<F>,
    pub ff1_w: Tensor<F>,
    pub ff1_b: Tensor<F>,
    pub ff2_w: Tensor<F>,
    pub ff2_b: Tensor<F>,
}

/// All trainable encoder tensors, plus the score scale `a`, which is
/// trained jointly with them.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<F: Scalar = f32> {
    pub config: EncoderConfig,
    pub tok_emb: Tensor<F>,
    pub pos_emb: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub proj_w: Tensor<F>,
    pub proj_b: Tensor<F>,
    pub scale_a: Tensor<F>,
}

macro_rules! for_each_tensor {
    ($p:expr, $out:ident, $($ref:tt)+) => {{
        let p = $p;
        let mut f = |n: String, t| $out.push((n, t));
        f("tok_emb".to_string(), $($ref)+ p.tok_emb);
        f("pos_emb".to_string(), $($ref)+ p.pos_emb);
        for (i, l) in ($($ref)+ p.layers).into_iter().enumerate() {
            f(format!("layer{i}.ln1.gamma"), $($ref)+ l.ln1_gamma);
            f(format!("layer{i}.ln1.beta"), $($ref)+ l.ln1_beta);
            f(format!("layer{i}.attn.q"), $($ref)+ l.attn.q);
            f(format!("layer{i}.attn.q_bias"), $($ref)+ l.attn.q_bias);
            f(format!("layer{i}.attn.k"), $($ref)+ l.attn.k);
            f(format!("layer{i}.attn.v"), $($ref)+ l.attn.v);
            f(format!("layer{i}.attn.v_bias"), $($ref)+ l.attn.v_bias);
            f(format!("layer{i}.attn.o"), $($ref)+ l.attn.o);
            f(format!("layer{i}.attn.o_bias"), $($ref)+ l.attn.o_bias);
            f(format!("layer{i}.ln2.gamma"), $($ref)+ l.ln2_gamma);
            f(format!("layer{i}.ln2.beta"), $($ref)+ l.ln2_beta);
            f(format!("layer{i}.ff1.w"), $($ref)+ l.ff1_w);
            f(format!("layer{i}.ff1.b"), $($ref)+ l.ff1_b);
            f(format!("layer{i}.ff2.w"), $($ref)+ l.ff2_w);
            f(format!("layer{i}.ff2.b"), $($ref)+ l.ff2_b);
        }
        f("proj.W".to_string(), $($ref)+ p.proj_w);
        f("proj.b".to_string(), $($ref)+ p.proj_b);
        f("scale_a".to_string(), $($ref)+ p.scale_a);
    }};
}

impl<F: Scalar> EncoderParams<F> {
    /// Weight matrices and embeddings from a ±2σ truncated normal with
    /// σ = 0.02; biases zero; layer-norm gains one; `a` = 16.
    pub fn init(config: &EncoderConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let (h, ff, d) = (config.hidden, config.ff_size, config.output_dim);
        let mut w = |dims: &[usize]| init_trunc_normal::<F>(dims, INIT_STD, rng);
        let tok_emb = w(&[config.vocab_size, h]);
        let pos_emb = w(&[config.max_len, h]);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerParams {
                ln1_gamma: Tensor::filled(&[h], F::one()),
                ln1_beta: Tensor::zeros(&[h]),
                attn: AttentionParams {
                    q: w(&[h, h]),
                    q_bias: Tensor::zeros(&[h]),
                    k: w(&[h, h]),
                    v: w(&[h, h]),
                    v_bias: Tensor::zeros(&[h]),
                    o: w(&[h, h]),
                    o_bias: Tensor::zeros(&[h]),
                },
                ln2_gamma: Tensor::filled(&[h], F::one()),
                ln2_beta: Tensor::zeros(&[h]),
                ff1_w: w(&[ff, h]),
                ff1_b: Tensor::zeros(&[ff]),
                ff2_w: w(&[h, ff]),
                ff2_b: Tensor::zeros(&[h]),
            });
        }
        let proj_w = w(&[d, h]);
        Ok(EncoderParams {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            proj_w,
            proj_b: Tensor::zeros(&[d]),
            scale_a: Tensor::scalar(F::of(INIT_SCALE)),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for_each_tensor!(self, out, &);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        for_each_tensor!(self, out, &mut);
        out
    }

    pub fn scale(&self) -> F {
        self.scale_a.item()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn clear_grad(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.clear_grad();
        }
    }

    pub fn cast<G: Scalar>(&self) -> EncoderParams<G> {
        let mut out = EncoderParams::<G> {
            config: self.config.clone(),
            tok_emb: Tensor::zeros(&[0]),
            pos_emb: Tensor::zeros(&[0]),
            layers: Vec::new(),
            proj_w: Tensor::zeros(&[0]),
            proj_b: Tensor::zeros(&[0]),
            scale_a: Tensor::zeros(&[0]),
        };
        out.layers = self
            .layers
            .iter()
            .map(|l| LayerParams {
                ln1_gamma: l.ln1_gamma.cast(),
                ln1_beta: l.ln1_beta.cast(),
                attn: AttentionParams {
                    q: l.attn.q.cast(),
                    q_bias: l.attn.q_bias.cast(),
                    k: l.attn.k.cast(),
                    v: l.attn.v.cast(),
                    v_bias: l.attn.v_bias.cast(),
                    o: l.attn.o.cast(),
                    o_bias: l.attn.o_bias.cast(),
                },
                ln2_gamma: l.ln2_gamma.cast(),
                ln2_beta: l.ln2_beta.cast(),
                ff1_w: l.ff1_w.cast(),
                ff1_b: l.ff1_b.cast(),
                ff2_w: l.ff2_w.cast(),
                ff2_b: l.ff2_b.cast(),
            })
            .collect();
        out.tok_emb = self.tok_emb.cast();
        out.pos_emb = self.pos_emb.cast();
        out.proj_w = self.proj_w.cast();
        out.proj_b = self.proj_b.cast();
        out.scale_a = self.scale_a.cast();
        out
    }
}

impl EncoderParams<f32> {
    pub fn to_named(&self) -> NamedTensors {
        self.named_tensors()
            .into_iter()
            .map(|(n, t)| {
                let mut t = t.clone();
                t.clear_grad();
                (n, t)
            })
            .collect()
    }

    /// Rebuild from named tensors; names and shapes must match `config`.
    pub fn from_named(config: &EncoderConfig, named: &NamedTensors) -> Result<Self> {
        let mut p = EncoderParams::<f32>::init(config, &mut RngState::new(0))?;
        let lookup: std::collections::HashMap<&str, &Tensor<f32>> =
            named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, slot) in p.named_tensors_mut() {
            let src = lookup
                .get(name.as_str())
                .ok_or_else(|| RelicError::Format(format!("checkpoint lacks tensor `{name}`")))?;
            if src.dims() != slot.dims() {
                return Err(RelicError::Format(format!(
                    "tensor `{name}` has dims {:?}, config expects {:?}",
                    src.dims(),
                    slot.dims()
                )));
            }
            *slot = (*src).clone();
        }
        Ok(p)
    }
}

struct BlockCache<F: Scalar> {
    ln1: LayerNormCache<F>,
    attn: AttentionCache<F>,
    drop_attn: DropoutMask<F>,
    ln2: LayerNormCache<F>,
    ln2_out: Tensor<F>,
    ff_pre: Tensor<F>,
    ff_act: Tensor<F>,
    drop_ff: DropoutMask<F>,
    n_query: usize,
    seq_len: usize,
}

fn block_forward<F: Scalar>(
    x: &Tensor<F>,
    l: &LayerParams<F>,
    cfg: &EncoderConfig,
    n_query: usize,
    n_valid: usize,
    mode: Mode,
    rng: &mut RngState,
) -> Result<(Tensor<F>, BlockCache<F>)> {
    let (seq_len, h) = x.matrix_dims();
    let (a, ln1) = layer_norm(x, &l.ln1_gamma, &l.ln1_beta)?;
    let (att, attn) = multi_head_attention(&a, &l.attn, cfg.heads, n_query, n_valid)?;
    let (att, drop_attn) = dropout(&att, cfg.keep_prob, mode, rng);
    let mut r = Tensor::from_vec(&[n_query, h], x.values()[..n_query * h].to_vec())?;
    for (v, d) in r.values_mut().iter_mut().zip(att.values()) {
        *v += *d;
    }
    let (ln2_out, ln2) = layer_norm(&r, &l.ln2_gamma, &l.ln2_beta)?;
    let ff_pre = linear(&ln2_out, &l.ff1_w, Some(&l.ff1_b))?;
    let ff_act = gelu(&ff_pre);
    let ff = linear(&ff_act, &l.ff2_w, Some(&l.ff2_b))?;
    let (ff, drop_ff) = dropout(&ff, cfg.keep_prob, mode, rng);
    for (v, d) in r.values_mut().iter_mut().zip(ff.values()) {
        *v += *d;
    }
    Ok((
        r,
        BlockCache {
            ln1,
            attn,
            drop_attn,
            ln2,
            ln2_out,
            ff_pre,
            ff_act,
            drop_ff,
            n_query,
            seq_len,
        },
    ))
}

fn block_backward<F: Scalar>(c: &BlockCache<F>, l: &mut LayerParams<F>, dout: &Tensor<F>) -> Result<Tensor<F>> {
    let d_ff = dropout_backward(&c.drop_ff, dout);
    let d_act = linear_backward(&c.ff_act, &mut l.ff2_w, Some(&mut l.ff2_b), &d_ff)?;
    let d_pre = gelu_backward(&c.ff_pre, &d_act)?;
    let d_ln2 = linear_backward(&c.ln2_out, &mut l.ff1_w, Some(&mut l.ff1_b), &d_pre)?;
    let mut d_r = layer_norm_backward(&c.ln2, &mut l.ln2_gamma, &mut l.ln2_beta, &d_ln2)?;
    for (v, d) in d_r.values_mut().iter_mut().zip(dout.values()) {
        *v += *d;
    }
    let d_att = dropout_backward(&c.drop_attn, &d_r);
    let d_a = multi_head_attention_backward(&c.attn, &mut l.attn, &d_att)?;
    let mut dx = layer_norm_backward(&c.ln1, &mut l.ln1_gamma, &mut l.ln1_beta, &d_a)?;
    let h = dx.cols();
    debug_assert_eq!(dx.rows(), c.seq_len);
    for (v, d) in dx.values_mut()[..c.n_query * h].iter_mut().zip(d_r.values()) {
        *v += *d;
    }
    Ok(dx)
}

/// Everything the backward pass needs from one forward pass.
pub struct EncodeCache<F: Scalar> {
    ids: Vec<u32>,
    emb_drop: DropoutMask<F>,
    blocks: Vec<BlockCache<F>>,
    pooled: Tensor<F>,
}

fn check_ids<F: Scalar>(params: &EncoderParams<F>, ids: &[u32]) -> Result<()> {
    let cfg = &params.config;
    if ids.is_empty() {
        return Err(RelicError::Empty("context has no tokens".into()));
    }
    if ids.len() > cfg.max_len {
        return Err(RelicError::ContextTooLong {
            len: ids.len(),
            max_len: cfg.max_len,
        });
    }
    if let Some(bad) = ids.iter().find(|t| **t as usize >= cfg.vocab_size) {
        return Err(RelicError::InvalidArgument(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Encode `ids` where only the first `n_valid` positions are real tokens.
pub fn forward<F: Scalar>(
    params: &EncoderParams<F>,
    ids: &[u32],
    n_valid: usize,
    mode: Mode,
    rng: &mut RngState,
) -> Result<(Vec<F>, EncodeCache<F>)> {
    check_ids(params, ids)?;
    let cfg = &params.config;
    let t = ids.len();
    if n_valid == 0 || n_valid > t {
        return Err(RelicError::InvalidArgument(format!("n_valid {n_valid} for {t} tokens")));
    }
    let mut x = embedding_lookup(&params.tok_emb, ids)?;
    for (v, p) in x.values_mut().iter_mut().zip(params.pos_emb.values()) {
        *v += *p;
    }
    let (mut x, emb_drop) = dropout(&x, cfg.keep_prob, mode, rng);
    let mut blocks = Vec::with_capacity(params.layers.len());
    let n_layers = params.layers.len();
    for (i, l) in params.layers.iter().enumerate() {
        let n_query = if i + 1 == n_layers { 1 } else { t };
        let (y, c) = block_forward(&x, l, cfg, n_query, n_valid, mode, rng)?;
        blocks.push(c);
        x = y;
    }
    let pooled = Tensor::from_vec(&[1, cfg.hidden], x.row(0).to_vec())?;
    let out = linear(&pooled, &params.proj_w, Some(&params.proj_b))?;
    Ok((
        out.into_values(),
        EncodeCache {
            ids: ids.to_vec(),
            emb_drop,
            blocks,
            pooled,
        },
    ))
}

/// Accumulate parameter gradients for upstream gradient `d_out` (length d).
pub fn backward<F: Scalar>(params: &mut EncoderParams<F>, cache: &EncodeCache<F>, d_out: &[F]) -> Result<()> {
    let d = params.config.output_dim;
    if d_out.len() != d {
        return Err(RelicError::shape("encoder_backward", format!("gradient of {} for d={d}", d_out.len())));
    }
    let dy = Tensor::from_vec(&[1, d], d_out.to_vec())?;
    let h = params.config.hidden;
    let t = cache.ids.len();
    let d_pooled = linear_backward(&cache.pooled, &mut params.proj_w, Some(&mut params.proj_b), &dy)?;
    let mut dx = if params.layers.is_empty() {
        let mut z = Tensor::zeros(&[t, h]);
        z.row_mut(0).copy_from_slice(d_pooled.values());
        z
    } else {
        d_pooled
    };
    for (l, c) in params.layers.iter_mut().zip(&cache.blocks).rev() {
        dx = block_backward(c, l, &dx)?;
    }
    let d_emb = dropout_backward(&cache.emb_drop, &dx);
    embedding_backward(&mut params.tok_emb, &cache.ids, &d_emb)?;
    let positions: Vec<u32> = (0..t as u32).collect();
    embedding_backward(&mut params.pos_emb, &positions, &d_emb)?;
    Ok(())
}

pub fn encode_context<F: Scalar>(
    params: &EncoderParams<F>,
    context: &Context,
    mode: Mode,
    rng: &mut RngState,
) -> Result<Vec<F>> {
    let ids = context.token_ids();
    Ok(forward(params, ids, ids.len(), mode, rng)?.0)
}

/// Encode contexts as one `[PAD]`-padded batch; padding is masked out of
/// attention. Returns a B×d matrix.
pub fn encode_batch<F: Scalar>(
    params: &EncoderParams<F>,
    contexts: &[Context],
    mode: Mode,
    rng: &mut RngState,
) -> Result<Tensor<F>> {
    let d = params.config.output_dim;
    let width = contexts.iter().map(Context::len).max().unwrap_or(0);
    let mut out = Tensor::zeros(&[contexts.len(), d]);
    let mut ids = Vec::with_capacity(width);
    for (i, c) in contexts.iter().enumerate() {
        ids.clear();
        ids.extend_from_slice(c.token_ids());
        ids.resize(width, PAD);
        let (v, _) = forward(params, &ids, c.len(), mode, rng)?;
        out.row_mut(i).copy_from_slice(&v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CLS, ENT_END, ENT_START, MASK};
    use crate::neural::grad_check;

    fn cfg(layers: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            max_len: 12,
            hidden: 16,
            layers,
            heads: 4,
            ff_size: 24,
            output_dim: 8,
            keep_prob: 0.9,
        }
    }

    fn ctx(ids: &[u32]) -> Context {
        Context::new(ids.to_vec()).unwrap()
    }

    /// Larger weights than the 0.02 init so every path carries signal.
    fn spread<F: Scalar>(p: &mut EncoderParams<F>, seed: u64) {
        let mut rng = RngState::new(seed);
        for (_, t) in p.named_tensors_mut() {
            for v in t.values_mut() {
                *v += F::of(0.3 * rng.standard_normal());
            }
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let p: EncoderParams = EncoderParams::init(&cfg(2), &mut RngState::new(1)).unwrap();
        let c = ctx(&[CLS, 7, ENT_START, 8, ENT_END, 9]);
        let a = encode_context(&p, &c, Mode::Eval, &mut RngState::new(2)).unwrap();
        let b = encode_context(&p, &c, Mode::Eval, &mut RngState::new(3)).unwrap();
        assert_eq!(a, b);
        let other = ctx(&[CLS, 7, ENT_START, MASK, ENT_END, 9]);
        let o = encode_context(&p, &other, Mode::Eval, &mut RngState::new(2)).unwrap();
        assert_ne!(a, o);
    }

    #[test]
    fn zero_layers_closed_form() {
        let p: EncoderParams<f64> = EncoderParams::init(&cfg(0), &mut RngState::new(4)).unwrap();
        let c = ctx(&[CLS, 7, 8]);
        let out = encode_context(&p, &c, Mode::Eval, &mut RngState::new(0)).unwrap();
        let h: Vec<f64> = (0..16)
            .map(|i| p.tok_emb.row(CLS as usize)[i] + p.pos_emb.row(0)[i])
            .collect();
        for (o, val) in out.iter().enumerate() {
            let expect: f64 =
                (0..16).map(|i| p.proj_w.row(o)[i] * h[i]).sum::<f64>() + p.proj_b.values()[o];
            assert!((val - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_matches_single_and_permutes() {
        let mut p: EncoderParams = EncoderParams::init(&cfg(2), &mut RngState::new(5)).unwrap();
        spread(&mut p, 6);
        let c1 = ctx(&[CLS, 7, ENT_START, 8, ENT_END]);
        let c2 = ctx(&[CLS, 11, 12, 13, ENT_START, MASK, ENT_END, 9, 10]);
        let mut rng = RngState::new(0);
        let s1 = encode_context(&p, &c1, Mode::Eval, &mut rng).unwrap();
        let s2 = encode_context(&p, &c2, Mode::Eval, &mut rng).unwrap();
        let one = encode_batch(&p, std::slice::from_ref(&c1), Mode::Eval, &mut rng).unwrap();
        assert_eq!(one.row(0), &s1[..]);
        let ab = encode_batch(&p, &[c1.clone(), c2.clone()], Mode::Eval, &mut rng).unwrap();
        let ba = encode_batch(&p, &[c2, c1], Mode::Eval, &mut rng).unwrap();
        assert_eq!(ab.row(0), ba.row(1));
        assert_eq!(ab.row(1), ba.row(0));
        for (a, b) in ab.row(0).iter().zip(&s1) {
            assert!((a - b).abs() < 1e-5);
        }
        for (a, b) in ab.row(1).iter().zip(&s2) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn padding_invariance() {
        let mut p: EncoderParams = EncoderParams::init(&cfg(2), &mut RngState::new(7)).unwrap();
        spread(&mut p, 8);
        let ids = [CLS, 7, ENT_START, 8, ENT_END, 9];
        let mut rng = RngState::new(0);
        let (base, _) = forward(&p, &ids, ids.len(), Mode::Eval, &mut rng).unwrap();
        for extra in 1..=6 {
            let mut padded = ids.to_vec();
            padded.resize(ids.len() + extra, PAD);
            let (v, _) = forward(&p, &padded, ids.len(), Mode::Eval, &mut rng).unwrap();
            for (a, b) in v.iter().zip(&base) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn rejects_long_or_out_of_vocab() {
        let p: EncoderParams = EncoderParams::init(&cfg(1), &mut RngState::new(1)).unwrap();
        let long = Context::question(&[7; 12]).unwrap();
        assert!(matches!(
            encode_context(&p, &long, Mode::Eval, &mut RngState::new(0)),
            Err(RelicError::ContextTooLong { len: 13, max_len: 12 })
        ));
        let oov = Context::question(&[25]).unwrap();
        assert!(encode_context(&p, &oov, Mode::Eval, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn question_contexts_are_accepted() {
        let p: EncoderParams = EncoderParams::init(&cfg(2), &mut RngState::new(1)).unwrap();
        let q = Context::question(&[7, 8, 9]).unwrap();
        assert_eq!(encode_context(&p, &q, Mode::Eval, &mut RngState::new(0)).unwrap().len(), 8);
    }

    #[test]
    fn named_round_trip() {
        let p: EncoderParams = EncoderParams::init(&cfg(2), &mut RngState::new(3)).unwrap();
        let named = p.to_named();
        assert!(named.iter().any(|(n, _)| n == "layer1.attn.q"));
        assert_eq!(named.last().unwrap().0, "scale_a");
        assert_eq!(EncoderParams::from_named(&cfg(2), &named).unwrap(), p);
        assert!(EncoderParams::from_named(&cfg(1), &named[..3].to_vec()).is_err());
    }

    fn flat(p: &EncoderParams<f64>) -> Vec<Tensor<f64>> {
        p.named_tensors().into_iter().map(|(_, t)| t.clone()).collect()
    }

    fn unflat(template: &EncoderParams<f64>, ts: &[Tensor<f64>]) -> EncoderParams<f64> {
        let mut p = template.clone();
        for ((_, slot), t) in p.named_tensors_mut().into_iter().zip(ts) {
            *slot = t.clone();
        }
        p
    }

    #[test]
    fn encoder_gradients_with_scalar_head() {
        for layers in [0, 1, 2] {
            let mut c = cfg(layers);
            c.keep_prob = 1.0;
            let mut p: EncoderParams<f64> = EncoderParams::init(&c, &mut RngState::new(10)).unwrap();
            spread(&mut p, 11);
            let ids = [CLS, 7, ENT_START, 8, 9, ENT_END, 3, 1];
            let head: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
            let mut rng = RngState::new(0);
            let (_, cache) = forward(&p, &ids, ids.len(), Mode::Train, &mut rng).unwrap();
            backward(&mut p, &cache, &head).unwrap();
            let template = p.clone();
            let mut ts = flat(&p);
            let rep = grad_check(
                |ts: &[Tensor<f64>]| {
                    let q = unflat(&template, ts);
                    let (o, _) = forward(&q, &ids, ids.len(), Mode::Eval, &mut RngState::new(0)).unwrap();
                    o.iter().zip(&head).map(|(a, b)| a * b).sum()
                },
                &mut ts,
                1e-5,
                300,
                &mut RngState::new(1),
            );
            assert!(rep.max_rel_error < 1e-5, "layers {layers}: {rep:?}");
        }
    }
}
