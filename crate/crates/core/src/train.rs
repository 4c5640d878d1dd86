//! Pretraining and adapter fine-tuning loops.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{self, AdapterError, AdapterSpec};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::diff::{Bindings, DiffError, Gradients, Graph, NodeId, ParamSet, Scalar, Tensor};
use crate::model::{build_forward, init_model, ForwardSpec, ModelConfig, ModelError};
use crate::seed::derive_seed;
use crate::task::{encode, Encoded, RetrievalInstance, TaskConfig, TaskError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss mask selects no position")]
    EmptyMask,
    #[error("mask has {mask} entries for {tokens} tokens, or selects the last position")]
    BadMask { mask: usize, tokens: usize },
    #[error("{needed} positions needed (sequence plus offsets), max_seq_len is {max}")]
    TooLong { needed: usize, max: usize },
    #[error("diverged during {phase} at step {step}: {detail}")]
    Divergence { phase: String, step: usize, detail: String },
    #[error("checkpoint is not a {0} checkpoint")]
    WrongCheckpoint(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMask {
    /// Only the answer token after `ANS`.
    #[default]
    AnswerOnly,
    /// Every next-token prediction in the text.
    FullSequence,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    pub loss_mask: LossMask,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Each example's text positions start at an offset drawn uniformly
    /// from this list. Pretraining only; including `K` lets a base model
    /// accept K soft tokens prepended later.
    pub position_offsets: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            schedule: Schedule::Cosine,
            epochs: 4,
            batch_size: 8,
            seed: 0,
            precision: Precision::F32,
            loss_mask: LossMask::AnswerOnly,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            position_offsets: vec![0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return bad("weight_decay must be >= 0 and eps > 0");
        }
        if self.position_offsets.is_empty() {
            return bad("position_offsets must not be empty");
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Learning rate at `step` of `total`. Cosine decays from the base rate at
/// step 0 to zero at the final step.
pub fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.learning_rate,
        Schedule::Cosine if total <= 1 => cfg.learning_rate,
        Schedule::Cosine => {
            let t = step.min(total - 1) as f64 / (total - 1) as f64;
            0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Position mask for `enc` under `policy`: entry `t` means row `t` is
/// scored on predicting token `t + 1`.
pub fn loss_mask(policy: LossMask, enc: &Encoded) -> Vec<bool> {
    let n = enc.tokens.len();
    match policy {
        LossMask::AnswerOnly => (0..n).map(|t| t + 1 == enc.answer_index).collect(),
        LossMask::FullSequence => (0..n).map(|t| t + 1 < n).collect(),
    }
}

/// Next-token targets for each row selected by `mask`.
pub fn next_token_targets(tokens: &[usize], mask: &[bool]) -> Result<Vec<Option<usize>>, TrainError> {
    if mask.len() != tokens.len() || mask.last() == Some(&true) {
        return Err(TrainError::BadMask { mask: mask.len(), tokens: tokens.len() });
    }
    if !mask.iter().any(|m| *m) {
        return Err(TrainError::EmptyMask);
    }
    Ok(mask.iter().enumerate().map(|(t, m)| m.then(|| tokens[t + 1])).collect())
}

/// Mean next-token cross-entropy over the masked rows of `logits` (L, V).
pub fn masked_loss<T: Scalar>(logits: &Tensor<T>, tokens: &[usize], mask: &[bool]) -> Result<f64, TrainError> {
    let targets = next_token_targets(tokens, mask)?;
    if logits.shape().len() != 2 || logits.shape()[0] != tokens.len() {
        return Err(DiffError::Shape { op: "loss", detail: format!("logits {:?} for {} tokens", logits.shape(), tokens.len()) }.into());
    }
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, targets);
    g.evaluate(&ParamSet::new(), &Bindings::new())?;
    Ok(g.value(loss).expect("evaluated").data()[0].to_f64().expect("finite"))
}

/// One record of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MetricsRecord {
    Step { phase: String, epoch: usize, step: usize, loss: f64, lr: f64 },
    Epoch { phase: String, epoch: usize, mean_loss: f64 },
}

pub trait MetricsSink {
    fn record(&mut self, rec: MetricsRecord);
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, rec: MetricsRecord) {
        self.push(rec);
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: MetricsRecord) {}
}

/// Writes one JSON object per line.
pub struct JsonlSink<W: Write>(pub W);

impl<W: Write> MetricsSink for JsonlSink<W> {
    fn record(&mut self, rec: MetricsRecord) {
        let line = serde_json::to_string(&rec).expect("record serializes");
        // metrics are best-effort; a failed write must not kill training
        let _ = writeln!(self.0, "{line}");
    }
}

pub fn encode_all(task: &TaskConfig, data: &[RetrievalInstance]) -> Result<Vec<Encoded>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(data.iter().map(|inst| encode(inst, task)).collect::<Result<_, _>>()?)
}

/// What the loop trains besides (or instead of) the base.
enum Mode<'a> {
    Base,
    Adapter(&'a AdapterSpec),
}

struct Loop<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    mode: Mode<'a>,
    phase: &'static str,
}

impl Loop<'_> {
    fn example_graph<T: Scalar>(&self, enc: &Encoded, offset: usize) -> Result<(Graph<T>, NodeId), TrainError> {
        let mut g = Graph::new();
        let k = enc.slot_offsets.len();
        let (soft, lowrank) = match self.mode {
            Mode::Base => (None, None),
            Mode::Adapter(spec) => match spec {
                AdapterSpec::LowRank(l) => (None, Some(l)),
                AdapterSpec::LocationEncoding(m) | AdapterSpec::PromptTuning(m) => {
                    let s = adapter::locations_for(m.location, enc)?;
                    let input = g.constant(adapter::adapter_input::<T>(spec, Some(&s), k)?);
                    (Some((adapter::build_soft_tokens(&mut g, spec, input)?, k)), None)
                }
            },
        };
        let n_soft = soft.map_or(0, |(_, k)| k);
        let mask = loss_mask(self.train.loss_mask, enc);
        let targets = next_token_targets(&enc.tokens, &mask)?;
        let rows: Vec<usize> = (0..mask.len()).filter(|t| mask[*t]).map(|t| t + n_soft).collect();
        let targets: Vec<Option<usize>> = targets.into_iter().flatten().map(Some).collect();
        let spec = ForwardSpec { tokens: &enc.tokens, soft, position_offset: offset, rows: Some(rows), lowrank };
        let logits = build_forward(&mut g, self.model, &spec)?;
        let loss = g.cross_entropy(logits, targets);
        Ok((g, loss))
    }

    fn diverged(&self, step: usize, detail: impl ToString) -> TrainError {
        TrainError::Divergence { phase: self.phase.to_string(), step, detail: detail.to_string() }
    }

    fn run<T: Scalar>(
        &self,
        params: &mut ParamSet<T>,
        data: &[Encoded],
        metrics: &mut dyn MetricsSink,
    ) -> Result<u64, TrainError> {
        let tc = self.train;
        let n_soft = match self.mode {
            Mode::Adapter(s) if s.produces_soft_tokens() => data.iter().map(|e| e.slot_offsets.len()).max().unwrap_or(0),
            _ => 0,
        };
        let longest = data.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        let needed = longest + n_soft + tc.position_offsets.iter().max().copied().unwrap_or(0);
        if needed > self.model.max_seq_len {
            return Err(TrainError::TooLong { needed, max: self.model.max_seq_len });
        }
        let spe = tc.steps_per_epoch(data.len());
        let total = spe * tc.epochs;
        let mut opt = AdamW::new(params, tc);
        let mut step = 0;
        for epoch in 0..tc.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &[0, epoch as u64])));
            let mut epoch_loss = 0.0;
            for batch in order.chunks(tc.batch_size) {
                let mut jitter = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &[1, step as u64]));
                let offsets: Vec<usize> =
                    batch.iter().map(|_| tc.position_offsets[jitter.random_range(0..tc.position_offsets.len())]).collect();
                // per-example gradients summed in batch order, so results do not
                // depend on the thread count
                let shared: &ParamSet<T> = params;
                let parts: Vec<Result<(f64, Gradients<T>), TrainError>> = batch
                    .par_iter()
                    .zip(offsets.par_iter())
                    .map(|(&i, &off)| {
                        let (mut g, loss) = self.example_graph::<T>(&data[i], off)?;
                        g.evaluate(shared, &Bindings::new()).map_err(|e| match e {
                            DiffError::NonFinite { .. } => self.diverged(step, e),
                            e => e.into(),
                        })?;
                        let l = g.value(loss).expect("evaluated").data()[0].to_f64().expect("finite");
                        let mut grads = Gradients::new(shared);
                        g.backward(loss, &mut grads)?;
                        Ok((l, grads))
                    })
                    .collect();
                let mut grads = Gradients::new(params);
                let mut batch_loss = 0.0;
                for part in parts {
                    let (l, g) = part?;
                    batch_loss += l;
                    grads.add_assign(&g);
                }
                batch_loss /= batch.len() as f64;
                grads.scale(T::lit(1.0 / batch.len() as f64));
                if !batch_loss.is_finite() || !grads.all_finite() {
                    return Err(self.diverged(step, "non-finite loss or gradient"));
                }
                if let Some(c) = tc.grad_clip {
                    clip_global_norm(&mut grads, c);
                }
                let lr = lr_at(tc, step, total);
                opt.step(params, &grads, lr);
                if !params.all_finite() {
                    return Err(self.diverged(step, "non-finite parameter after update"));
                }
                metrics.record(MetricsRecord::Step { phase: self.phase.into(), epoch, step, loss: batch_loss, lr });
                epoch_loss += batch_loss;
                step += 1;
            }
            metrics.record(MetricsRecord::Epoch { phase: self.phase.into(), epoch, mean_loss: epoch_loss / spe as f64 });
        }
        Ok(step as u64)
    }
}

fn clip_global_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) {
    let sq: f64 = (0..grads.len())
        .filter_map(|i| grads.get(i))
        .flat_map(|b| b.iter())
        .map(|v| {
            let v = v.to_f64().expect("finite");
            v * v
        })
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        grads.scale(T::lit(max_norm / norm));
    }
}

/// Decoupled-weight-decay Adam. Decay applies to matrices only.
pub struct AdamW<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamSet<T>, cfg: &TrainConfig) -> Self {
        let state = || {
            params
                .entries()
                .iter()
                .map(|p| p.trainable.then(|| vec![T::zero(); p.value.numel()]))
                .collect::<Vec<_>>()
        };
        Self { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: cfg.weight_decay, t: 0, m: state(), v: state() }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = T::lit(lr / c1);
        let (tb1, tb2) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.eps);
        for idx in 0..params.len() {
            let (Some(m), Some(v), Some(g)) = (self.m[idx].as_mut(), self.v[idx].as_mut(), grads.get(idx)) else {
                continue;
            };
            let decay = if params.entry(idx).value.shape().len() >= 2 {
                T::lit(1.0 - lr * self.weight_decay)
            } else {
                T::one()
            };
            let p = params.data_mut(idx);
            for j in 0..p.len() {
                m[j] = tb1 * m[j] + ob1 * g[j];
                v[j] = tb2 * v[j] + ob2 * g[j] * g[j];
                p[j] = p[j] * decay - step * m[j] / ((v[j] * inv_c2).sqrt() + eps);
            }
        }
    }
}

fn seeds(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Trains a base model from scratch; initialization seed is derived from
/// `train.seed`.
pub fn pretrain(
    model: &ModelConfig,
    task: &TaskConfig,
    dataset: &[RetrievalInstance],
    train: &TrainConfig,
    metrics: &mut dyn MetricsSink,
) -> Result<Checkpoint, TrainError> {
    train.validate()?;
    model.validate()?;
    let data = encode_all(task, dataset)?;
    let init_seed = derive_seed(train.seed, &[10]);
    let lp = Loop { model, train, mode: Mode::Base, phase: "pretrain" };
    let (params, steps) = match train.precision {
        Precision::F32 => {
            let mut p = init_model::<f32>(model, init_seed)?;
            let s = lp.run(&mut p, &data, metrics)?;
            (p, s)
        }
        Precision::F64 => {
            let mut p = init_model::<f64>(model, init_seed)?;
            let s = lp.run(&mut p, &data, metrics)?;
            (p.cast(), s)
        }
    };
    Ok(Checkpoint {
        kind: CheckpointKind::Model { model: model.clone() },
        params,
        seeds: seeds(&[("train", train.seed), ("init", init_seed)]),
        steps,
    })
}

pub struct FinetuneOutcome {
    pub adapter: Checkpoint,
    /// Adapter scalars whose value changed during training.
    pub updated_scalars: usize,
    pub base_hash_before: String,
    pub base_hash_after: String,
}

/// Trains adapter parameters over a frozen base. Only the adapter is ever
/// handed to the optimizer; base hashes are recorded for audit.
pub fn finetune(
    base: &Checkpoint,
    spec: &AdapterSpec,
    task: &TaskConfig,
    dataset: &[RetrievalInstance],
    train: &TrainConfig,
    metrics: &mut dyn MetricsSink,
) -> Result<FinetuneOutcome, TrainError> {
    train.validate()?;
    let CheckpointKind::Model { model } = &base.kind else {
        return Err(TrainError::WrongCheckpoint("model"));
    };
    spec.validate(model)?;
    let data = encode_all(task, dataset)?;
    let base_hash_before = base.params.content_hash();
    let init_seed = derive_seed(train.seed, &[20]);
    let train_nojitter = TrainConfig { position_offsets: vec![0], ..train.clone() };
    let lp = Loop { model, train: &train_nojitter, mode: Mode::Adapter(spec), phase: "finetune" };

    fn go<T: Scalar>(
        lp: &Loop<'_>,
        base: &ParamSet<f32>,
        init: ParamSet<T>,
        data: &[Encoded],
        metrics: &mut dyn MetricsSink,
    ) -> Result<(ParamSet<f32>, ParamSet<f32>, ParamSet<f32>, u64), TrainError> {
        let mut all: ParamSet<T> = base.cast();
        all.set_trainable(false);
        let n_base = all.len();
        all.extend(&init)?;
        let steps = lp.run(&mut all, data, metrics)?;
        let after_base = all.subset(|p| !p.trainable).cast();
        let trained = all.subset(|p| p.trainable).cast();
        debug_assert_eq!(after_base.len(), n_base);
        Ok((init.cast(), trained, after_base, steps))
    }

    let (before, trained, after_base, steps) = match train.precision {
        Precision::F32 => go(&lp, &base.params, adapter::init_adapter::<f32>(spec, model, init_seed)?, &data, metrics)?,
        Precision::F64 => go(&lp, &base.params, adapter::init_adapter::<f64>(spec, model, init_seed)?, &data, metrics)?,
    };
    let updated_scalars = before
        .entries()
        .iter()
        .zip(trained.entries())
        .map(|(a, b)| a.value.data().iter().zip(b.value.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count())
        .sum();
    let base_hash_after = if after_base.len() == base.params.len() {
        after_base.content_hash()
    } else {
        String::new()
    };
    let mut trained = trained;
    trained.set_trainable(true);
    Ok(FinetuneOutcome {
        adapter: Checkpoint {
            kind: CheckpointKind::Adapter { model: model.clone(), spec: spec.clone(), base_hash: base_hash_before.clone() },
            params: trained,
            seeds: seeds(&[("train", train.seed), ("init", init_seed)]),
            steps,
        },
        updated_scalars,
        base_hash_before,
        base_hash_after,
    })
}
