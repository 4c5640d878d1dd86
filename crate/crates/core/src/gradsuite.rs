//! Finite-difference suite over every differentiable op, small composite
//! nets, the toy model and each adapter kind. Each case builds one randomized
//! 64-bit instance per trial index and returns its relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{
    adapter_input, build_soft_tokens, init_adapter, locations_for, Activation, AdapterSpec, LocationMode, LowRankSpec,
    MlpSpec, Projection,
};
use crate::diff::{finite_diff_check, Bindings, Graph, NodeId, ParamSet, Tensor};
use crate::model::{build_forward, init_model, ForwardSpec, ModelConfig, PositionInit, PositionalScheme};
use crate::task::{encode, gen_instance, Flavor, TaskConfig};
use crate::vocab::Vocab;

pub const STEP: f64 = 1e-5;

pub type CaseFn = fn(u64) -> Result<f64, String>;

pub struct Case {
    pub name: &'static str,
    pub run: CaseFn,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

/// `sum(w ⊙ x)` with random `w`, so gradients are not degenerate.
fn weighted_sum(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, x: NodeId, shape: Vec<usize>) -> NodeId {
    let w = g.constant(rand_tensor(rng, shape));
    let prod = g.mul(x, w);
    g.sum(prod)
}

fn op_case(
    trial: u64,
    build: impl Fn(&mut Graph<f64>, &mut ParamSet<f64>, &mut ChaCha8Rng) -> NodeId,
) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
    let mut g = Graph::new();
    let mut params = ParamSet::new();
    let loss = build(&mut g, &mut params, &mut rng);
    finite_diff_check(&mut g, &mut params, &Bindings::new(), loss, STEP).map_err(|e| e.to_string())
}

fn insert(p: &mut ParamSet<f64>, name: &str, t: Tensor<f64>) {
    p.insert(name, t).expect("fresh name");
}

fn matmul(trial: u64) -> Result<f64, String> {
    op_case(trial, |g, p, rng| {
        insert(p, "a", rand_tensor(rng, vec![3, 4]));
        insert(p, "b", rand_tensor(rng, vec![4, 2]));
        let (a, b) = (g.param("a"), g.param("b"));
        let c = g.matmul(a, b);
        weighted_sum(g, rng, c, vec![3, 2])
    })
}

fn matmul_nt(trial: u64) -> Result<f64, String> {
    op_case(trial, |g, p, rng| {
        insert(p, "a", rand_tensor(rng, vec![3, 4]));
        insert(p, "b", rand_tensor(rng, vec![5, 4]));
        let (a, b) = (g.param("a"), g.param("b"));
        let c = g.matmul_nt(a, b);
        weighted_sum(g, rng, c, vec![3, 5])
    })
}

fn add_bias(trial: u64) -> Result<f64, String> {
    op_case(trial, |g, p, rng| {
        insert(p, "a", rand_tensor(rng, vec![3, 4]));
        insert(p, "b", rand_tensor(rng, vec![3, 4]));
        insert(p, "bias", rand_tensor(rng, vec![4]));
        let (a, b, bias) = (g.param("a"), g.param("b"), g.param("bias"));
        let s = g.add(a, b);
        let y = g.add_bias(s, bias);
        weighted_sum(g, rng, y, vec![3, 4])
    })
}

fn mul_scale(trial: u64) -> Result<f64, String> {
    op_case(trial, |g, p, rng| {
        insert(p, "a", rand_tensor(rng, vec![2, 3]));
        insert(p, "b", rand_tensor(rng, vec![2, 3]));
        let (a, b) = (g.param("a"), g.param("b"));
        let m = g.mul(a, b);
        let y = g.scale(m, -0.7);
        weighted_sum(g, rng, y, vec![2, 3])
    })
}

fn tanh_gelu(trial: u64) -> Result<f64, String> {
    op_case(trial, |g, p, rng| {
        insert(p, "a", rand_tensor(rng, vec![3, 5]));
        let a = g.param("a");
        let t = g.tanh(a);
        let y = g.gelu(t);
        let z = g.gelu(a);
        let s = g.add(y, z);
        weighted_sum(g, rng, s, vec![3, 5])
    })
}

fn relu(trial: u64) -> Result<f64, String> {
    op_case(trial, |g, p, rng| {
        // away from the kink at 0
        let t = Tensor::from_fn(vec![3, 5], |_| {
            let v: f64 = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        });
        insert(p, "a", t);
        let a = g.param("a");
        let y = g.relu(a);
        weighted_sum(g, rng, y, vec![3, 5])
    })
}

fn softmax(trial: u64) -> Result<f64, String> {
    op_case(trial, |g, p, rng| {
        insert(p, "a", rand_tensor(rng, vec![3, 6]));
        let a = g.param("a");
        let y = g.softmax(a);
        weighted_sum(g, rng, y, vec![3, 6])
    })
}

fn causal_softmax(trial: u64) -> Result<f64, String> {
    op_case(trial, |g, p, rng| {
        insert(p, "a", rand_tensor(rng, vec![5, 5]));
        let a = g.param("a");
        let y = g.causal_softmax(a);
        weighted_sum(g, rng, y, vec![5, 5])
    })
}

fn layer_norm(trial: u64) -> Result<f64, String> {
    op_case(trial, |g, p, rng| {
        insert(p, "x", rand_tensor(rng, vec![4, 6]));
        insert(p, "g", rand_tensor(rng, vec![6]));
        insert(p, "b", rand_tensor(rng, vec![6]));
        let (x, ga, b) = (g.param("x"), g.param("g"), g.param("b"));
        let y = g.layer_norm(x, ga, b, 1e-5);
        weighted_sum(g, rng, y, vec![4, 6])
    })
}

fn row_ops(trial: u64) -> Result<f64, String> {
    op_case(trial, |g, p, rng| {
        insert(p, "table", rand_tensor(rng, vec![7, 4]));
        insert(p, "extra", rand_tensor(rng, vec![2, 4]));
        let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..7)).collect();
        let table = g.param("table");
        let extra = g.param("extra");
        let e = g.embedding(table, ids);
        let rows = g.concat_rows(vec![extra, e]);
        let left = g.slice_cols(rows, 0, 3);
        let right = g.slice_cols(rows, 1, 4);
        let cols = g.concat_cols(vec![left, right]);
        let picked = g.select_rows(cols, vec![6, 0, 3, 3]);
        weighted_sum(g, rng, picked, vec![4, 6])
    })
}

fn cross_entropy(trial: u64) -> Result<f64, String> {
    op_case(trial, |g, p, rng| {
        insert(p, "logits", rand_tensor(rng, vec![4, 6]));
        let targets = vec![Some(rng.random_range(0..6)), None, Some(rng.random_range(0..6)), Some(0)];
        let l = g.param("logits");
        g.cross_entropy(l, targets)
    })
}

fn vocab() -> Vocab {
    Vocab { max_slots: 3, n_keys: 4, n_fillers: 2 }
}

fn model(layers: usize) -> ModelConfig {
    ModelConfig {
        vocab: vocab(),
        d_model: 8,
        n_layers: layers,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 24,
        positional: PositionalScheme::LearnedAbsolute,
        position_init: PositionInit::Normal,
    }
}

fn task() -> TaskConfig {
    TaskConfig { k: 3, doc_len: 1, query_len: 1, flavor: Flavor::KeyMatch, vocab: vocab(), seed: 0 }
}

/// Default init is too small for well-conditioned differences.
fn randomize(p: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) {
    for idx in 0..p.len() {
        let gain = p.entry(idx).name.ends_with(".g");
        for v in p.data_mut(idx) {
            *v = rng.random_range(-0.8..0.8) + if gain { 1.0 } else { 0.0 };
        }
    }
}

fn two_layer_net(trial: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial);
    let mut p = ParamSet::new();
    for (name, shape) in [("w1", vec![5, 7]), ("b1", vec![7]), ("w2", vec![7, 3]), ("b2", vec![3])] {
        insert(&mut p, name, Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)));
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(vec![4, 5], |_| rng.random_range(-1.0..1.0)));
    let (w1, b1, w2, b2) = (g.param("w1"), g.param("b1"), g.param("w2"), g.param("b2"));
    let h = g.matmul(x, w1);
    let h = g.add_bias(h, b1);
    let h = g.tanh(h);
    let y = g.matmul(h, w2);
    let y = g.add_bias(y, b2);
    let targets = (0..4).map(|_| Some(rng.random_range(0..3))).collect();
    let loss = g.cross_entropy(y, targets);
    finite_diff_check(&mut g, &mut p, &Bindings::new(), loss, STEP).map_err(|e| e.to_string())
}

fn transformer_block(trial: u64) -> Result<f64, String> {
    let cfg = model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
    let mut p = init_model::<f64>(&cfg, trial).map_err(|e| e.to_string())?;
    randomize(&mut p, &mut rng);
    let tokens: Vec<usize> = (0..7).map(|_| rng.random_range(0..cfg.vocab_size())).collect();
    let mut g = Graph::new();
    let spec = ForwardSpec { tokens: &tokens, position_offset: trial as usize % 3, ..Default::default() };
    let logits = build_forward(&mut g, &cfg, &spec).map_err(|e| e.to_string())?;
    let targets = (0..7).map(|_| Some(rng.random_range(0..cfg.vocab_size()))).collect();
    let loss = g.cross_entropy(logits, targets);
    finite_diff_check(&mut g, &mut p, &Bindings::new(), loss, STEP).map_err(|e| e.to_string())
}

fn full_model(trial: u64) -> Result<f64, String> {
    let cfg = model(2);
    let task = task();
    let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
    let mut p = init_model::<f64>(&cfg, trial).map_err(|e| e.to_string())?;
    randomize(&mut p, &mut rng);
    let inst = gen_instance(&task, 1 + trial as usize % 3, trial).map_err(|e| e.to_string())?;
    let enc = encode(&inst, &task).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let spec = ForwardSpec { tokens: &enc.tokens, rows: Some(vec![enc.answer_index - 1]), ..Default::default() };
    let logits = build_forward(&mut g, &cfg, &spec).map_err(|e| e.to_string())?;
    let loss = g.cross_entropy(logits, vec![Some(enc.tokens[enc.answer_index])]);
    finite_diff_check(&mut g, &mut p, &Bindings::new(), loss, STEP).map_err(|e| e.to_string())
}

/// Adapter over a frozen base; only adapter scalars are differenced.
fn adapter_case(spec: &AdapterSpec, trial: u64, salt: u64) -> Result<f64, String> {
    let cfg = model(1);
    let task = task();
    let mut rng = ChaCha8Rng::seed_from_u64(salt + trial);
    let mut base = init_model::<f64>(&cfg, trial).map_err(|e| e.to_string())?;
    randomize(&mut base, &mut rng);
    base.set_trainable(false);
    let mut ad = init_adapter::<f64>(spec, &cfg, trial).map_err(|e| e.to_string())?;
    randomize(&mut ad, &mut rng);
    base.extend(&ad).map_err(|e| e.to_string())?;

    let inst = gen_instance(&task, 1 + trial as usize % 3, trial).map_err(|e| e.to_string())?;
    let enc = encode(&inst, &task).map_err(|e| e.to_string())?;
    let k = enc.slot_offsets.len();
    let mut g = Graph::new();
    let (soft, lowrank, n_soft) = match spec {
        AdapterSpec::LowRank(l) => (None, Some(l), 0),
        AdapterSpec::LocationEncoding(m) | AdapterSpec::PromptTuning(m) => {
            let s = locations_for(m.location, &enc).map_err(|e| e.to_string())?;
            let input = g.constant(adapter_input::<f64>(spec, Some(&s), k).map_err(|e| e.to_string())?);
            (Some((build_soft_tokens(&mut g, spec, input).map_err(|e| e.to_string())?, k)), None, k)
        }
    };
    let fspec =
        ForwardSpec { tokens: &enc.tokens, soft, rows: Some(vec![n_soft + enc.answer_index - 1]), lowrank, ..Default::default() };
    let logits = build_forward(&mut g, &cfg, &fspec).map_err(|e| e.to_string())?;
    let loss = g.cross_entropy(logits, vec![Some(enc.tokens[enc.answer_index])]);
    finite_diff_check(&mut g, &mut base, &Bindings::new(), loss, STEP).map_err(|e| e.to_string())
}

fn mlp(location: LocationMode) -> MlpSpec {
    MlpSpec { input_dim: 1, hidden_dim: 6, output_dim: 8, activation: Activation::Tanh, location }
}

fn le_offset(trial: u64) -> Result<f64, String> {
    adapter_case(&AdapterSpec::LocationEncoding(mlp(LocationMode::Offset)), trial, 300)
}

fn le_index(trial: u64) -> Result<f64, String> {
    adapter_case(&AdapterSpec::LocationEncoding(mlp(LocationMode::Index)), trial, 350)
}

fn pt(trial: u64) -> Result<f64, String> {
    adapter_case(&AdapterSpec::PromptTuning(mlp(LocationMode::Offset)), trial, 400)
}

fn lowrank(trial: u64) -> Result<f64, String> {
    let spec = AdapterSpec::LowRank(LowRankSpec { rank: 2, alpha: 4.0, targets: vec![Projection::Q, Projection::V] });
    adapter_case(&spec, trial, 500)
}

pub fn op_cases() -> Vec<Case> {
    vec![
        Case { name: "matmul", run: matmul },
        Case { name: "matmul_nt", run: matmul_nt },
        Case { name: "add/add_bias", run: add_bias },
        Case { name: "mul/scale", run: mul_scale },
        Case { name: "tanh/gelu", run: tanh_gelu },
        Case { name: "relu", run: relu },
        Case { name: "softmax", run: softmax },
        Case { name: "causal_softmax", run: causal_softmax },
        Case { name: "layer_norm", run: layer_norm },
        Case { name: "embedding/concat/slice/select", run: row_ops },
        Case { name: "cross_entropy", run: cross_entropy },
    ]
}

pub fn composite_cases() -> Vec<Case> {
    vec![
        Case { name: "two-layer net", run: two_layer_net },
        Case { name: "transformer block", run: transformer_block },
        Case { name: "full model", run: full_model },
        Case { name: "le adapter (offset)", run: le_offset },
        Case { name: "le adapter (index)", run: le_index },
        Case { name: "pt adapter", run: pt },
        Case { name: "lowrank adapter", run: lowrank },
    ]
}

/// Largest error over trials `0..trials`.
pub fn worst(case: &Case, trials: u64) -> Result<f64, String> {
    let mut max = 0.0f64;
    for t in 0..trials {
        let e = (case.run)(t).map_err(|e| format!("{} trial {t}: {e}", case.name))?;
        max = max.max(e);
    }
    Ok(max)
}
