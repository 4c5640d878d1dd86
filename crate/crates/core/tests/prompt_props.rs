use std::sync::atomic::{AtomicUsize, Ordering};

use posbias_core::eval::{Prediction, SlotPredictor};
use posbias_core::prompt::{
    build, build_few_shot, build_hierarchical, build_zero_shot, group_ranges, hierarchical_infer, select_shots, PromptError,
    PromptInstance, SolvedExample, Strategy,
};
use posbias_core::task::{gen_instance, Flavor, RetrievalInstance, TaskConfig};
use posbias_core::vocab::Vocab;
use proptest::prelude::*;

fn task(k: usize) -> TaskConfig {
    TaskConfig { k, doc_len: 2, query_len: 1, flavor: Flavor::KeyMatch, vocab: Vocab { max_slots: 20, n_keys: 24, n_fillers: 4 }, seed: 0 }
}

/// Picks the candidate whose first token is largest; deterministic and
/// content-based, so it composes across passes.
fn by_content(inst: &RetrievalInstance) -> Option<usize> {
    (0..inst.k()).max_by_key(|&i| (inst.candidates[i][0], std::cmp::Reverse(i))).map(|i| i + 1)
}

struct Counting<'a>(&'a AtomicUsize);

impl SlotPredictor for Counting<'_> {
    fn predict(&self, _: &RetrievalInstance, _: &TaskConfig) -> Result<Prediction, String> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Ok(Prediction::slot(1))
    }
}

struct Failing;

impl SlotPredictor for Failing {
    fn predict(&self, _: &RetrievalInstance, _: &TaskConfig) -> Result<Prediction, String> {
        Err("endpoint down".into())
    }
}

proptest! {
    #[test]
    fn ranges_partition_the_labels(k in 1usize..40, g in 1usize..40) {
        prop_assume!(g <= k);
        let r = group_ranges(k, g).unwrap();
        prop_assert_eq!(r.len(), g);
        prop_assert_eq!(r[0].0, 1);
        prop_assert_eq!(r[g - 1].1, k);
        for w in r.windows(2) {
            prop_assert_eq!(w[1].0, w[0].1 + 1);
        }
        let sizes: Vec<usize> = r.iter().map(|(a, b)| b - a + 1).collect();
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(sizes[0] - sizes[g - 1] <= 1);
    }

    #[test]
    fn winners_map_back_into_range(k in 1usize..=20, g in 1usize..=20, truth in 1usize..=20, seed in any::<u64>()) {
        prop_assume!(g <= k && truth <= k);
        let t = task(k);
        let inst = gen_instance(&t, truth, seed).unwrap();
        let oracle = |x: &RetrievalInstance| Some(x.truth_slot);
        prop_assert_eq!(hierarchical_infer(&oracle, &inst, &t, g).unwrap(), truth);
        let picked = hierarchical_infer(&by_content, &inst, &t, g).unwrap();
        prop_assert!((1..=k).contains(&picked));
        // content-based choice is global maximum regardless of grouping
        prop_assert_eq!(picked, by_content(&inst).unwrap());
    }

    #[test]
    fn singleton_groups_equal_direct_prediction(k in 1usize..=20, truth in 1usize..=20, seed in any::<u64>()) {
        prop_assume!(truth <= k);
        let t = task(k);
        let inst = gen_instance(&t, truth, seed).unwrap();
        prop_assert_eq!(hierarchical_infer(&by_content, &inst, &t, k).unwrap(), by_content(&inst).unwrap());
    }

    #[test]
    fn builders_are_pure(k in 1usize..=20, g in 1usize..=20, seed in any::<u64>()) {
        prop_assume!(g <= k);
        let inst = gen_instance(&task(k), 1, seed).unwrap();
        let p = PromptInstance::from_tokens(&inst, "Product");
        prop_assert_eq!(build_zero_shot(&p).unwrap(), build_zero_shot(&p).unwrap());
        prop_assert_eq!(build_hierarchical(&p, g).unwrap(), build_hierarchical(&p, g).unwrap());
        prop_assert_eq!(build_few_shot(&p, &[]).unwrap(), build_zero_shot(&p).unwrap());
        let text = build_zero_shot(&p).unwrap();
        for i in 1..=k {
            // label i appears once as an entry and the suffix mentions [1]
            let n = text.matches(&format!("Potential Product [{i}](")).count();
            prop_assert_eq!(n, 1);
        }
        prop_assert_eq!(text.matches("](").count(), k);
    }
}

#[test]
fn constant_first_slot_trace() {
    let t = task(6);
    let inst = gen_instance(&t, 5, 3).unwrap();
    let calls = AtomicUsize::new(0);
    assert_eq!(hierarchical_infer(&Counting(&calls), &inst, &t, 2).unwrap(), 1);
    // two groups of three, then the pair of winners (slots 1 and 4)
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[test]
fn failures_carry_group_context() {
    let t = task(6);
    let inst = gen_instance(&t, 2, 3).unwrap();
    let err = hierarchical_infer(&Failing, &inst, &t, 2).unwrap_err().to_string();
    assert!(err.contains("pass 1") && err.contains("group"), "{err}");
    assert!(hierarchical_infer(&Failing, &inst, &t, 7).is_err());
}

#[test]
fn duplicate_texts_keep_unique_labels() {
    let p = PromptInstance {
        task: "Pick one.".into(),
        history: vec![],
        candidates: vec!["same".into(); 4],
        noun: "Paper".into(),
    };
    let text = build_zero_shot(&p).unwrap();
    for i in 1..=4 {
        assert_eq!(text.matches(&format!("Potential Paper [{i}](same)")).count(), 1);
    }
}

#[test]
fn leaking_shots_are_skipped() {
    let inst = |c: &[&str]| PromptInstance {
        task: "Pick one.".into(),
        history: vec![],
        candidates: c.iter().map(|s| s.to_string()).collect(),
        noun: "Product".into(),
    };
    let main = inst(&["a", "b", "c"]);
    let pool = vec![
        SolvedExample { instance: inst(&["c", "a", "b"]), answer: 2 },
        SolvedExample { instance: inst(&["d", "e", "f"]), answer: 1 },
        SolvedExample { instance: inst(&["a", "b", "g"]), answer: 3 },
    ];
    let picked = select_shots(&main, &pool, 2).unwrap();
    assert_eq!(picked, pool[1..].to_vec());
    assert_eq!(build(Strategy::FewShot(2), &main, &pool).unwrap(), build_few_shot(&main, &pool[1..]).unwrap());
    assert_eq!(select_shots(&main, &pool, 3), Err(PromptError::NotEnoughShots { wanted: 3, have: 2 }));
}
