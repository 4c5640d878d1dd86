//! Parameter-efficient adapters over a frozen base model.
//!
//! - Location encoding (LE): a two-layer network maps each candidate's
//!   relative location `S_i` to a soft token `A_i ∈ R^d`.
//! - Prompt tuning (PT): the same network fed a constant input, so all K
//!   soft tokens are identical.
//! - Low-rank: additive `scale · A·B` updates on attention projections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{Bindings, DiffError, Graph, NodeId, ParamSet, Scalar, Tensor};
use crate::model::{attention_weight_names, ModelConfig, ModelError, SoftTokenBlock};
use crate::task::Encoded;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("invalid adapter spec: {0}")]
    InvalidSpec(String),
    #[error("slot offsets must be strictly increasing and below the text length ({0})")]
    BadOffsets(String),
    #[error("text length must be positive")]
    ZeroLength,
    #[error("location vector has {got} entries, expected {expected}")]
    LocationLength { got: usize, expected: usize },
    #[error("low-rank adapters do not produce soft tokens")]
    NoSoftTokens,
    #[error("location-encoding adapter needs a location vector")]
    MissingLocations,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Gelu,
}

/// How `S_i` is computed for the LE adapter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocationMode {
    /// Token offset of the `i`-th slot marker over the text length.
    #[default]
    Offset,
    /// `(i - 1) / K`.
    Index,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    #[serde(default = "one")]
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub location: LocationMode,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    fn index(self) -> usize {
        match self {
            Projection::Q => 0,
            Projection::K => 1,
            Projection::V => 2,
            Projection::O => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankSpec {
    pub rank: usize,
    /// The update is scaled by `alpha / rank`.
    pub alpha: f64,
    #[serde(default = "all_projections")]
    pub targets: Vec<Projection>,
}

fn all_projections() -> Vec<Projection> {
    Projection::ALL.to_vec()
}

impl LowRankSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub(crate) fn targets_projection(&self, which: usize) -> bool {
        self.targets.iter().any(|p| p.index() == which)
    }

    /// Factor parameter names for a base weight: `(A, B)`.
    pub fn factor_names(weight: &str) -> (String, String) {
        (format!("lowrank.{weight}.a"), format!("lowrank.{weight}.b"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AdapterSpec {
    LocationEncoding(MlpSpec),
    PromptTuning(MlpSpec),
    LowRank(LowRankSpec),
}

impl AdapterSpec {
    pub fn tag(&self) -> &'static str {
        match self {
            AdapterSpec::LocationEncoding(_) => "le",
            AdapterSpec::PromptTuning(_) => "pt",
            AdapterSpec::LowRank(_) => "lowrank",
        }
    }

    pub fn lowrank(&self) -> Option<&LowRankSpec> {
        match self {
            AdapterSpec::LowRank(l) => Some(l),
            _ => None,
        }
    }

    pub fn mlp(&self) -> Option<&MlpSpec> {
        match self {
            AdapterSpec::LocationEncoding(m) | AdapterSpec::PromptTuning(m) => Some(m),
            AdapterSpec::LowRank(_) => None,
        }
    }

    pub fn produces_soft_tokens(&self) -> bool {
        self.mlp().is_some()
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<(), AdapterError> {
        match self {
            AdapterSpec::LocationEncoding(m) | AdapterSpec::PromptTuning(m) => {
                if m.input_dim != 1 {
                    return Err(AdapterError::InvalidSpec(format!("input_dim must be 1, got {}", m.input_dim)));
                }
                if m.hidden_dim == 0 {
                    return Err(AdapterError::InvalidSpec("hidden_dim must be at least 1".into()));
                }
                if m.output_dim != model.d_model {
                    return Err(AdapterError::InvalidSpec(format!(
                        "output_dim {} != model d_model {}",
                        m.output_dim, model.d_model
                    )));
                }
            }
            AdapterSpec::LowRank(l) => {
                if l.rank == 0 {
                    return Err(AdapterError::InvalidSpec("rank must be at least 1".into()));
                }
                if l.targets.is_empty() {
                    return Err(AdapterError::InvalidSpec("no target matrices".into()));
                }
                if !l.alpha.is_finite() {
                    return Err(AdapterError::InvalidSpec("alpha must be finite".into()));
                }
            }
        }
        Ok(())
    }
}

/// Relative location of each candidate within the text, `S ∈ [0, 1)^K`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationVector(Vec<f64>);

impl LocationVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `S_i = slot_offsets[i] / total_text_len`. Soft tokens are not counted.
pub fn relative_locations(slot_offsets: &[usize], total_text_len: usize) -> Result<LocationVector, AdapterError> {
    if total_text_len == 0 {
        return Err(AdapterError::ZeroLength);
    }
    if slot_offsets.is_empty() {
        return Err(AdapterError::BadOffsets("no offsets".into()));
    }
    if slot_offsets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AdapterError::BadOffsets(format!("{slot_offsets:?} not increasing")));
    }
    if let Some(o) = slot_offsets.iter().find(|o| **o >= total_text_len) {
        return Err(AdapterError::BadOffsets(format!("offset {o} >= length {total_text_len}")));
    }
    Ok(LocationVector(slot_offsets.iter().map(|&o| o as f64 / total_text_len as f64).collect()))
}

/// `S` for one encoded instance under the configured mode. The length
/// used is that of the full encoded sequence.
pub fn locations_for(mode: LocationMode, enc: &Encoded) -> Result<LocationVector, AdapterError> {
    match mode {
        LocationMode::Offset => relative_locations(&enc.slot_offsets, enc.tokens.len()),
        LocationMode::Index => Ok(index_locations(enc.slot_offsets.len())),
    }
}

/// `S_i = (i - 1) / K`.
pub fn index_locations(k: usize) -> LocationVector {
    LocationVector((0..k).map(|i| i as f64 / k as f64).collect())
}

pub const W1: &str = "adapter.w1";
pub const B1: &str = "adapter.b1";
pub const W2: &str = "adapter.w2";
pub const B2: &str = "adapter.b2";

/// Initial adapter parameters.
///
/// MLP: first layer `N(0, 1)` so distinct locations land on distinct
/// hidden features, second layer `N(0, 0.02)` so soft tokens start at the
/// scale of token embeddings; zero biases. Low-rank: `A ~ N(0, 1/sqrt(d_in))`,
/// `B = 0`, so the initial update is zero.
pub fn init_adapter<T: Scalar>(spec: &AdapterSpec, model: &ModelConfig, seed: u64) -> Result<ParamSet<T>, AdapterError> {
    spec.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |shape: Vec<usize>, std: f64| {
        let normal = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| T::lit(normal.sample(&mut rng)))
    };
    let mut p = ParamSet::new();
    match spec {
        AdapterSpec::LocationEncoding(m) | AdapterSpec::PromptTuning(m) => {
            p.insert(W1, sample(vec![m.input_dim, m.hidden_dim], 1.0))?;
            p.insert(B1, Tensor::zeros(vec![m.hidden_dim]))?;
            p.insert(W2, sample(vec![m.hidden_dim, m.output_dim], 0.02))?;
            p.insert(B2, Tensor::zeros(vec![m.output_dim]))?;
        }
        AdapterSpec::LowRank(l) => {
            let d = model.d_model;
            for layer in 0..model.n_layers {
                let names = attention_weight_names(layer);
                for proj in &l.targets {
                    let (a, b) = LowRankSpec::factor_names(&names[proj.index()]);
                    p.insert(a, sample(vec![d, l.rank], 1.0 / (d as f64).sqrt()))?;
                    p.insert(b, Tensor::zeros(vec![l.rank, d]))?;
                }
            }
        }
    }
    Ok(p)
}

/// Network input for K soft tokens: `S` as a `(K, 1)` column for LE, a
/// column of ones for PT.
pub fn adapter_input<T: Scalar>(
    spec: &AdapterSpec,
    locations: Option<&LocationVector>,
    k: usize,
) -> Result<Tensor<T>, AdapterError> {
    match spec {
        AdapterSpec::LocationEncoding(_) => {
            let s = locations.ok_or(AdapterError::MissingLocations)?;
            if s.len() != k {
                return Err(AdapterError::LocationLength { got: s.len(), expected: k });
            }
            Ok(Tensor::new(vec![k, 1], s.as_slice().iter().map(|v| T::lit(*v)).collect())?)
        }
        AdapterSpec::PromptTuning(_) => Ok(Tensor::full(vec![k, 1], T::one())),
        AdapterSpec::LowRank(_) => Err(AdapterError::NoSoftTokens),
    }
}

/// Appends `f_θ` applied row-wise to `input` (shape `(K, 1)`); returns the
/// `(K, d)` soft-token node.
pub fn build_soft_tokens<T: Scalar>(g: &mut Graph<T>, spec: &AdapterSpec, input: NodeId) -> Result<NodeId, AdapterError> {
    let m = spec.mlp().ok_or(AdapterError::NoSoftTokens)?;
    let (w1, b1, w2, b2) = (g.param(W1), g.param(B1), g.param(W2), g.param(B2));
    let h = g.matmul(input, w1);
    let h = g.add_bias(h, b1);
    let h = match m.activation {
        Activation::Tanh => g.tanh(h),
        Activation::Relu => g.relu(h),
        Activation::Gelu => g.gelu(h),
    };
    let a = g.matmul(h, w2);
    Ok(g.add_bias(a, b2))
}

/// Computes the K soft tokens.
pub fn adapter_forward<T: Scalar>(
    spec: &AdapterSpec,
    params: &ParamSet<T>,
    locations: Option<&LocationVector>,
    k: usize,
) -> Result<SoftTokenBlock<T>, AdapterError> {
    let input = adapter_input(spec, locations, k)?;
    let mut g = Graph::new();
    let x = g.constant(input);
    let out = build_soft_tokens(&mut g, spec, x)?;
    g.evaluate(params, &Bindings::new())?;
    Ok(SoftTokenBlock::new(g.value(out).expect("evaluated").clone())?)
}

/// `W' = W + scale · (A·B)ᵀ` for `W: d_out × d_in`, `A: d_in × r`,
/// `B: r × d_out`. `W` is not modified.
pub fn lowrank_effective_weight<T: Scalar>(
    w: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    scale: T,
) -> Result<Tensor<T>, AdapterError> {
    let shape_err = |d: String| AdapterError::Diff(DiffError::Shape { op: "lowrank", detail: d });
    let (d_out, d_in) = match w.shape() {
        [o, i] => (*o, *i),
        s => return Err(shape_err(format!("W must be 2-d, got {s:?}"))),
    };
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != d_in || b.shape()[1] != d_out || a.shape()[1] != b.shape()[0] {
        return Err(shape_err(format!("W {:?}, A {:?}, B {:?}", w.shape(), a.shape(), b.shape())));
    }
    let update = a.matmul(b)?.transpose()?;
    let data = w.data().iter().zip(update.data()).map(|(x, u)| *x + scale * *u).collect();
    Ok(Tensor::new(vec![d_out, d_in], data)?)
}

/// Exact number of trainable scalars for `spec` on `model`.
pub fn count_tunable(spec: &AdapterSpec, model: &ModelConfig) -> usize {
    match spec {
        AdapterSpec::LocationEncoding(m) | AdapterSpec::PromptTuning(m) => {
            m.input_dim * m.hidden_dim + m.hidden_dim + m.hidden_dim * m.output_dim + m.output_dim
        }
        AdapterSpec::LowRank(l) => {
            // every target projection is d_model × d_model
            let per_matrix = l.rank * (model.d_model + model.d_model);
            per_matrix * l.targets.len() * model.n_layers
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PositionInit, PositionalScheme};
    use crate::vocab::Vocab;

    fn model(d: usize) -> ModelConfig {
        ModelConfig {
            vocab: Vocab { max_slots: 10, n_keys: 10, n_fillers: 4 },
            d_model: d,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 64,
            positional: PositionalScheme::LearnedAbsolute,
            position_init: PositionInit::Sinusoidal,
        }
    }

    fn mlp(hidden: usize, out: usize) -> MlpSpec {
        MlpSpec { input_dim: 1, hidden_dim: hidden, output_dim: out, activation: Activation::Tanh, location: LocationMode::Offset }
    }

    #[test]
    fn relative_locations_divide_by_length() {
        let s = relative_locations(&[10, 20], 30).unwrap();
        assert!((s.as_slice()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.as_slice()[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(relative_locations(&[0], 7).unwrap().as_slice(), &[0.0]);
        let even = relative_locations(&[3, 7, 11, 15, 19], 23).unwrap();
        let diffs: Vec<f64> = even.as_slice().windows(2).map(|w| w[1] - w[0]).collect();
        assert!(diffs.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-9));
    }

    #[test]
    fn relative_location_errors() {
        assert!(matches!(relative_locations(&[1, 1], 5), Err(AdapterError::BadOffsets(_))));
        assert!(matches!(relative_locations(&[1, 5], 5), Err(AdapterError::BadOffsets(_))));
        assert!(matches!(relative_locations(&[0], 0), Err(AdapterError::ZeroLength)));
    }

    #[test]
    fn zero_parameters_give_zero_tokens() {
        let spec = AdapterSpec::LocationEncoding(mlp(4, 8));
        let mut p = init_adapter::<f64>(&spec, &model(8), 0).unwrap();
        for name in [W1, B1, W2, B2] {
            let shape = p.get(name).unwrap().shape().to_vec();
            p.set(name, Tensor::zeros(shape)).unwrap();
        }
        let s = relative_locations(&[2, 5, 9], 12).unwrap();
        let block = adapter_forward(&spec, &p, Some(&s), 3).unwrap();
        assert!(block.tensor().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn prompt_tuning_tokens_are_identical() {
        let spec = AdapterSpec::PromptTuning(mlp(4, 8));
        let p = init_adapter::<f32>(&spec, &model(8), 3).unwrap();
        let block = adapter_forward(&spec, &p, None, 5).unwrap();
        for i in 1..5 {
            assert_eq!(block.vector(i), block.vector(0));
        }
    }

    #[test]
    fn location_encoding_distinguishes_locations() {
        let spec = AdapterSpec::LocationEncoding(mlp(4, 8));
        let p = init_adapter::<f32>(&spec, &model(8), 3).unwrap();
        let s = relative_locations(&[2, 5, 9], 12).unwrap();
        let block = adapter_forward(&spec, &p, Some(&s), 3).unwrap();
        assert_ne!(block.vector(0), block.vector(1));
        assert!(matches!(adapter_forward(&spec, &p, Some(&s), 4), Err(AdapterError::LocationLength { .. })));
        assert!(matches!(adapter_forward(&spec, &p, None, 3), Err(AdapterError::MissingLocations)));
    }

    #[test]
    fn lowrank_does_not_make_soft_tokens() {
        let spec = AdapterSpec::LowRank(LowRankSpec { rank: 2, alpha: 2.0, targets: all_projections() });
        let p = init_adapter::<f32>(&spec, &model(8), 3).unwrap();
        assert!(matches!(adapter_forward(&spec, &p, None, 3), Err(AdapterError::NoSoftTokens)));
    }

    #[test]
    fn output_dim_must_match_model() {
        let spec = AdapterSpec::LocationEncoding(mlp(4, 6));
        assert!(matches!(spec.validate(&model(8)), Err(AdapterError::InvalidSpec(_))));
    }

    #[test]
    fn counts_match_reference_sizes() {
        let big = model(5120);
        let le = AdapterSpec::LocationEncoding(mlp(1024, 5120));
        let pt = AdapterSpec::PromptTuning(mlp(1024, 5120));
        assert_eq!(count_tunable(&le, &big), 5_250_048);
        assert_eq!(count_tunable(&pt, &big), 5_250_048);
        assert_eq!(count_tunable(&AdapterSpec::LocationEncoding(mlp(8, 16)), &model(16)), 160);
        let lr = AdapterSpec::LowRank(LowRankSpec { rank: 4, alpha: 8.0, targets: vec![Projection::Q, Projection::V] });
        // 2 layers × 2 matrices × r·(d_in + d_out)
        assert_eq!(count_tunable(&lr, &model(16)), 2 * 2 * 4 * 32);
        let p = init_adapter::<f32>(&lr, &model(16), 0).unwrap();
        assert_eq!(p.numel(), count_tunable(&lr, &model(16)));
    }

    #[test]
    fn lowrank_update_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rand = |shape: Vec<usize>| Tensor::<f64>::from_fn(shape, |_| normal.sample(&mut rng));
        let w = rand(vec![32, 32]);
        let a = rand(vec![32, 4]);
        let b = rand(vec![4, 32]);
        let zero_a = Tensor::zeros(vec![32, 4]);
        assert_eq!(lowrank_effective_weight(&w, &zero_a, &b, 1.0).unwrap(), w);
        assert_eq!(lowrank_effective_weight(&w, &a, &b, 0.0).unwrap(), w);
        let w2 = lowrank_effective_weight(&w, &a, &b, 0.5).unwrap();
        let delta: Vec<f64> = w2.data().iter().zip(w.data()).map(|(x, y)| x - y).collect();
        assert!(numerical_rank(delta, 32) <= 4);
        assert!(lowrank_effective_weight(&w, &b, &a, 1.0).is_err());
    }

    /// Rank by Gaussian elimination with partial pivoting.
    fn numerical_rank(mut m: Vec<f64>, n: usize) -> usize {
        let mut rank = 0;
        for col in 0..n {
            let pivot = (rank..n).max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs())).unwrap();
            if m[pivot * n + col].abs() < 1e-9 {
                continue;
            }
            for k in 0..n {
                m.swap(pivot * n + k, rank * n + k);
            }
            for r in rank + 1..n {
                let f = m[r * n + col] / m[rank * n + col];
                for k in 0..n {
                    m[r * n + k] -= f * m[rank * n + k];
                }
            }
            rank += 1;
        }
        rank
    }
}
