use posbias_core::adapter::{
    adapter_forward, init_adapter, relative_locations, Activation, AdapterSpec, LocationMode, MlpSpec, B1, B2, W1, W2,
};
use posbias_core::diff::ParamSet;
use posbias_core::model::{ModelConfig, PositionInit, PositionalScheme};
use posbias_core::vocab::Vocab;
use proptest::prelude::*;

fn model() -> ModelConfig {
    ModelConfig {
        vocab: Vocab { max_slots: 10, n_keys: 10, n_fillers: 2 },
        d_model: 12,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        max_seq_len: 64,
        positional: PositionalScheme::LearnedAbsolute,
        position_init: PositionInit::Sinusoidal,
    }
}

fn mlp(activation: Activation) -> MlpSpec {
    MlpSpec { input_dim: 1, hidden_dim: 5, output_dim: 12, activation, location: LocationMode::Offset }
}

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Tanh), Just(Activation::Relu), Just(Activation::Gelu)]
}

/// Plain-loop reference for one location.
fn reference(p: &ParamSet<f64>, act: Activation, s: f64) -> Vec<f64> {
    let (w1, b1, w2, b2) = (p.get(W1).unwrap(), p.get(B1).unwrap(), p.get(W2).unwrap(), p.get(B2).unwrap());
    let hidden = b1.numel();
    let out = b2.numel();
    let h: Vec<f64> = (0..hidden)
        .map(|j| {
            let z = s * w1.data()[j] + b1.data()[j];
            match act {
                Activation::Tanh => z.tanh(),
                Activation::Relu => z.max(0.0),
                Activation::Gelu => {
                    0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z * z * z)).tanh())
                }
            }
        })
        .collect();
    (0..out).map(|o| b2.data()[o] + (0..hidden).map(|j| h[j] * w2.data()[j * out + o]).sum::<f64>()).collect()
}

fn offsets() -> impl Strategy<Value = (Vec<usize>, usize)> {
    prop::collection::btree_set(0usize..40, 1..10)
        .prop_flat_map(|set| {
            let v: Vec<usize> = set.into_iter().collect();
            let min_len = v.last().unwrap() + 1;
            (Just(v), min_len..min_len + 20)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn location_tokens_are_the_map_applied_per_scalar(
        (offs, total) in offsets(),
        act in activation(),
        seed in any::<u64>(),
    ) {
        let spec = AdapterSpec::LocationEncoding(mlp(act));
        let p = init_adapter::<f64>(&spec, &model(), seed).unwrap();
        let s = relative_locations(&offs, total).unwrap();
        prop_assert!(s.as_slice().iter().all(|v| (0.0..1.0).contains(v)));
        let block = adapter_forward(&spec, &p, Some(&s), offs.len()).unwrap();
        for (i, &si) in s.as_slice().iter().enumerate() {
            let want = reference(&p, act, si);
            for (a, b) in block.vector(i).iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-10, "row {i}: {a} vs {b}");
            }
            // one location at a time gives the same row
            let single = relative_locations(&[offs[i]], total).unwrap();
            let one = adapter_forward(&spec, &p, Some(&single), 1).unwrap();
            prop_assert_eq!(one.vector(0), block.vector(i));
        }
    }

    #[test]
    fn prompt_tuning_rows_are_identical(k in 1usize..10, act in activation(), seed in any::<u64>()) {
        let spec = AdapterSpec::PromptTuning(mlp(act));
        let p = init_adapter::<f64>(&spec, &model(), seed).unwrap();
        let block = adapter_forward(&spec, &p, None, k).unwrap();
        for i in 1..k {
            prop_assert_eq!(block.vector(i), block.vector(0));
        }
    }
}
