//! Decoder-only transformer standing in for a pre-trained LLM.
//!
//! Pre-LN blocks, learned absolute position embeddings, untied output head.
//! Optional soft tokens are prepended ahead of the text and take positions
//! `0..K`; text positions shift by `K`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::LowRankSpec;
use crate::diff::{Bindings, DiffError, Graph, NodeId, ParamSet, Scalar, Tensor};
use crate::vocab::Vocab;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} positions (offset {offset}) exceeds max_seq_len {max}")]
    TooLong { len: usize, offset: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    UnknownToken { id: usize, vocab: usize },
    #[error("{k} candidates but only {max} slot tokens are reserved")]
    TooManySlots { k: usize, max: usize },
    #[error("soft token block: {0}")]
    SoftTokens(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalScheme {
    #[default]
    LearnedAbsolute,
}

/// Starting values of the learned position table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionInit {
    Normal,
    /// Sin/cos features at geometric frequencies, scaled to the token
    /// embedding scale. Offset-shifted positions are then related by a
    /// fixed rotation, which makes relative attention patterns cheap to learn.
    #[default]
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: Vocab,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub positional: PositionalScheme,
    #[serde(default)]
    pub position_init: PositionInit,
}

impl ModelConfig {
    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab.max_slots == 0 {
            return bad("vocabulary reserves no slot tokens".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        Ok(())
    }
}

/// Model parameters, keyed by name (see [`param_names`]).
pub type ModelParams<T> = ParamSet<T>;

/// The `K × d` block of adapter-produced vectors prepended to the input.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTokenBlock<T> {
    vectors: Tensor<T>,
}

impl<T: Scalar> SoftTokenBlock<T> {
    pub fn new(vectors: Tensor<T>) -> Result<Self, ModelError> {
        if vectors.shape().len() != 2 || vectors.shape()[0] == 0 {
            return Err(ModelError::SoftTokens(format!("expected (K, d), got {:?}", vectors.shape())));
        }
        if !vectors.all_finite() {
            return Err(ModelError::SoftTokens("non-finite entry".into()));
        }
        Ok(Self { vectors })
    }

    pub fn k(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vector(&self, i: usize) -> &[T] {
        self.vectors.row(i)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.vectors
    }
}

pub(crate) fn layer_prefix(l: usize) -> String {
    format!("h{l}")
}

/// Attention projection names of layer `l`, in `[q, k, v, o]` order.
pub fn attention_weight_names(l: usize) -> [String; 4] {
    let p = layer_prefix(l);
    [format!("{p}.attn.wq"), format!("{p}.attn.wk"), format!("{p}.attn.wv"), format!("{p}.attn.wo")]
}

/// Every parameter name with its shape, in canonical order.
pub fn param_names(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size());
    let mut out = vec![("tok_emb".to_string(), vec![v, d]), ("pos_emb".to_string(), vec![cfg.max_seq_len, d])];
    for l in 0..cfg.n_layers {
        let p = layer_prefix(l);
        out.push((format!("{p}.ln1.g"), vec![d]));
        out.push((format!("{p}.ln1.b"), vec![d]));
        for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
            out.push((format!("{p}.attn.{w}"), vec![d, d]));
            out.push((format!("{p}.attn.{b}"), vec![d]));
        }
        out.push((format!("{p}.ln2.g"), vec![d]));
        out.push((format!("{p}.ln2.b"), vec![d]));
        out.push((format!("{p}.mlp.w1"), vec![d, f]));
        out.push((format!("{p}.mlp.b1"), vec![f]));
        out.push((format!("{p}.mlp.w2"), vec![f, d]));
        out.push((format!("{p}.mlp.b2"), vec![d]));
    }
    out.push(("ln_f.g".to_string(), vec![d]));
    out.push(("ln_f.b".to_string(), vec![d]));
    out.push(("lm_head".to_string(), vec![d, v]));
    out
}

const INIT_STD: f64 = 0.02;

/// Normal(0, 0.02) weights, residual output projections scaled by
/// `1/sqrt(2 n_layers)`, unit layer-norm gains, zero biases.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let resid_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
    let mut params = ParamSet::new();
    for (name, shape) in param_names(cfg) {
        let t = if name == "pos_emb" && cfg.position_init == PositionInit::Sinusoidal {
            sinusoidal_table(cfg.max_seq_len, cfg.d_model, INIT_STD)
        } else if name.ends_with(".g") {
            Tensor::full(shape, T::one())
        } else if shape.len() == 1 {
            Tensor::zeros(shape)
        } else {
            let std = if name.ends_with("attn.wo") || name.ends_with("mlp.w2") { resid_std } else { INIT_STD };
            let normal = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| T::lit(normal.sample(&mut rng)))
        };
        params.insert(name, t)?;
    }
    Ok(params)
}

/// `table[p][2i] = sin(p ω_i)`, `table[p][2i+1] = cos(p ω_i)` with
/// `ω_i = 10000^(-2i/d)`, scaled so each entry has standard deviation `std`.
fn sinusoidal_table<T: Scalar>(len: usize, d: usize, std: f64) -> Tensor<T> {
    let amp = std * std::f64::consts::SQRT_2;
    Tensor::from_fn(vec![len, d], |idx| {
        let (p, j) = ((idx / d) as f64, idx % d);
        let w = 10000f64.powf(-((j / 2 * 2) as f64) / d as f64);
        T::lit(amp * if j % 2 == 0 { (p * w).sin() } else { (p * w).cos() })
    })
}

/// What to feed through [`build_forward`].
#[derive(Clone, Debug, Default)]
pub struct ForwardSpec<'a> {
    pub tokens: &'a [usize],
    /// Node holding the `(K, d)` soft-token block, and K.
    pub soft: Option<(NodeId, usize)>,
    /// Added to every position index (training-time position jitter).
    pub position_offset: usize,
    /// Rows of the combined sequence whose logits are wanted; all if `None`.
    pub rows: Option<Vec<usize>>,
    pub lowrank: Option<&'a LowRankSpec>,
}

/// Combined `[A; text]` input embeddings before position embeddings.
pub fn build_input_embeddings<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    spec: &ForwardSpec<'_>,
) -> Result<(NodeId, usize), ModelError> {
    let v = cfg.vocab_size();
    if let Some(&id) = spec.tokens.iter().find(|t| **t >= v) {
        return Err(ModelError::UnknownToken { id, vocab: v });
    }
    let n_soft = spec.soft.map_or(0, |(_, k)| k);
    let len = n_soft + spec.tokens.len();
    if len == 0 {
        return Err(ModelError::InvalidConfig("empty input".into()));
    }
    if spec.position_offset + len > cfg.max_seq_len {
        return Err(ModelError::TooLong { len, offset: spec.position_offset, max: cfg.max_seq_len });
    }
    let tok_emb = g.param("tok_emb");
    let text = (!spec.tokens.is_empty()).then(|| g.embedding(tok_emb, spec.tokens.to_vec()));
    let x = match (spec.soft, text) {
        (Some((soft, _)), Some(text)) => g.concat_rows(vec![soft, text]),
        (Some((soft, _)), None) => soft,
        (None, Some(text)) => text,
        (None, None) => unreachable!("len > 0"),
    };
    Ok((x, len))
}

/// Appends the model to `g` and returns the logits node, `(rows, V)`.
pub fn build_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    spec: &ForwardSpec<'_>,
) -> Result<NodeId, ModelError> {
    cfg.validate()?;
    let (emb, len) = build_input_embeddings(g, cfg, spec)?;
    let pos_emb = g.param("pos_emb");
    let positions: Vec<usize> = (spec.position_offset..spec.position_offset + len).collect();
    let pos = g.embedding(pos_emb, positions);
    let mut x = g.add(emb, pos);

    let (heads, hd) = (cfg.n_heads, cfg.head_dim());
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    for l in 0..cfg.n_layers {
        let p = layer_prefix(l);
        let names = attention_weight_names(l);
        let weight = |g: &mut Graph<T>, which: usize| -> NodeId {
            let w = g.param(names[which].clone());
            match spec.lowrank {
                Some(lr) if lr.targets_projection(which) => {
                    let (a_name, b_name) = LowRankSpec::factor_names(&names[which]);
                    let (a, b) = (g.param(a_name), g.param(b_name));
                    let ab = g.matmul(a, b);
                    let delta = g.scale(ab, lr.alpha / lr.rank as f64);
                    g.add(w, delta)
                }
                _ => w,
            }
        };

        let (g1, b1) = (g.param(format!("{p}.ln1.g")), g.param(format!("{p}.ln1.b")));
        let h = g.layer_norm(x, g1, b1, 1e-5);
        let proj = |g: &mut Graph<T>, which: usize, bias: &str| {
            let w = weight(g, which);
            let y = g.matmul(h, w);
            let b = g.param(format!("{p}.attn.{bias}"));
            g.add_bias(y, b)
        };
        let q = proj(g, 0, "bq");
        let k = proj(g, 1, "bk");
        let vv = proj(g, 2, "bv");
        let mut head_out = Vec::with_capacity(heads);
        for hh in 0..heads {
            let (s, e) = (hh * hd, (hh + 1) * hd);
            let qh = g.slice_cols(q, s, e);
            let kh = g.slice_cols(k, s, e);
            let vh = g.slice_cols(vv, s, e);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, inv_sqrt);
            let att = g.causal_softmax(scores);
            head_out.push(g.matmul(att, vh));
        }
        let cat = if heads == 1 { head_out[0] } else { g.concat_cols(head_out) };
        let wo = weight(g, 3);
        let o = g.matmul(cat, wo);
        let bo = g.param(format!("{p}.attn.bo"));
        let o = g.add_bias(o, bo);
        x = g.add(x, o);

        let (g2, b2) = (g.param(format!("{p}.ln2.g")), g.param(format!("{p}.ln2.b")));
        let h2 = g.layer_norm(x, g2, b2, 1e-5);
        let (w1, bb1) = (g.param(format!("{p}.mlp.w1")), g.param(format!("{p}.mlp.b1")));
        let (w2, bb2) = (g.param(format!("{p}.mlp.w2")), g.param(format!("{p}.mlp.b2")));
        let m = g.matmul(h2, w1);
        let m = g.add_bias(m, bb1);
        let m = g.gelu(m);
        let m = g.matmul(m, w2);
        let m = g.add_bias(m, bb2);
        x = g.add(x, m);
    }
    if let Some(rows) = &spec.rows {
        x = g.select_rows(x, rows.clone());
    }
    let (gf, bf) = (g.param("ln_f.g"), g.param("ln_f.b"));
    let x = g.layer_norm(x, gf, bf, 1e-5);
    let head = g.param("lm_head");
    Ok(g.matmul(x, head))
}

/// Full logits `(K_soft + L, V)` for a token sequence.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    soft: Option<&SoftTokenBlock<T>>,
) -> Result<Tensor<T>, ModelError> {
    forward_rows(params, cfg, tokens, soft, None, None)
}

pub(crate) fn forward_rows<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    soft: Option<&SoftTokenBlock<T>>,
    rows: Option<Vec<usize>>,
    lowrank: Option<&LowRankSpec>,
) -> Result<Tensor<T>, ModelError> {
    let mut g = Graph::new();
    let soft_node = match soft {
        Some(s) => {
            if s.dim() != cfg.d_model {
                return Err(ModelError::SoftTokens(format!("dimension {} != d_model {}", s.dim(), cfg.d_model)));
            }
            Some((g.constant(s.tensor().clone()), s.k()))
        }
        None => None,
    };
    let spec = ForwardSpec { tokens, soft: soft_node, position_offset: 0, rows, lowrank };
    let logits = build_forward(&mut g, cfg, &spec)?;
    g.evaluate(params, &Bindings::new())?;
    Ok(g.value(logits).expect("evaluated").clone())
}

/// Predicted slot and the restricted distribution over `SLOT_1..SLOT_K`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotPrediction {
    /// 1-based.
    pub slot: usize,
    pub dist: Vec<f64>,
}

/// Softmax over the `slot_tokens` entries of a logit row; argmax with ties
/// going to the lowest slot.
pub fn restricted_prediction<T: Scalar>(logits: &[T], slot_tokens: &[usize]) -> SlotPrediction {
    let restricted: Vec<f64> = slot_tokens.iter().map(|&t| logits[t].to_f64().expect("finite")).collect();
    let mut dist = restricted.clone();
    crate::diff::softmax_in_place(&mut dist);
    let mut best = 0;
    for (i, v) in restricted.iter().enumerate() {
        if *v > restricted[best] {
            best = i;
        }
    }
    SlotPrediction { slot: best + 1, dist }
}

/// Predicts among `k` candidates from a context that ends with `ANS`.
///
/// The logits row producing the answer token is the last one.
pub fn predict_slot<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    context: &[usize],
    k: usize,
    soft: Option<&SoftTokenBlock<T>>,
    lowrank: Option<&LowRankSpec>,
) -> Result<SlotPrediction, ModelError> {
    if k > cfg.vocab.max_slots {
        return Err(ModelError::TooManySlots { k, max: cfg.vocab.max_slots });
    }
    if k == 0 || context.is_empty() {
        return Err(ModelError::InvalidConfig("nothing to predict".into()));
    }
    let n_soft = soft.map_or(0, |s| s.k());
    let row = n_soft + context.len() - 1;
    let logits = forward_rows(params, cfg, context, soft, Some(vec![row]), lowrank)?;
    Ok(restricted_prediction(logits.data(), &cfg.vocab.slot_tokens(k)))
}
