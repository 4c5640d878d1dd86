//! Synthetic "one relevant among K" list-selection tasks.
//!
//! Two flavors share the same layout and differ in how the prompt signals
//! the relevant candidate:
//! - key-match: the first prompt token is a key; the relevant candidate is
//!   the only one containing that key.
//! - session-match: the prompt repeats a feature token between fillers; the
//!   relevant candidate is the only one carrying that feature.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::derive_seed;
use crate::vocab::{self, TokenKind, Vocab};

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("invalid task config: {0}")]
    InvalidConfig(String),
    #[error("truth slot {slot} outside 1..={k}")]
    SlotOutOfRange { slot: usize, k: usize },
    #[error("vocabulary has {available} {what} tokens, need {needed}")]
    VocabTooSmall { what: &'static str, available: usize, needed: usize },
    #[error("slot distribution: {0}")]
    BadDistribution(String),
    #[error("dataset size must be at least 1")]
    EmptyDataset,
    #[error("augmentation: {0}")]
    Augment(String),
    #[error("malformed sequence: {0}")]
    Decode(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavor {
    KeyMatch,
    SessionMatch,
}

impl Flavor {
    fn task_index(self) -> usize {
        match self {
            Flavor::KeyMatch => 0,
            Flavor::SessionMatch => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Candidates per instance.
    pub k: usize,
    pub doc_len: usize,
    pub query_len: usize,
    pub flavor: Flavor,
    pub vocab: Vocab,
    #[serde(default)]
    pub seed: u64,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.k == 0 {
            return Err(TaskError::InvalidConfig("k must be at least 1".into()));
        }
        if self.k > self.vocab.max_slots {
            return Err(TaskError::VocabTooSmall {
                what: "slot",
                available: self.vocab.max_slots,
                needed: self.k,
            });
        }
        if self.doc_len == 0 {
            return Err(TaskError::InvalidConfig("doc_len must be at least 1".into()));
        }
        if self.query_len == 0 {
            return Err(TaskError::InvalidConfig("query_len must be at least 1".into()));
        }
        if self.flavor == Flavor::SessionMatch && self.query_len < 3 {
            return Err(TaskError::InvalidConfig("session-match needs query_len >= 3".into()));
        }
        if self.vocab.n_keys < self.k {
            return Err(TaskError::VocabTooSmall { what: "key", available: self.vocab.n_keys, needed: self.k });
        }
        let needs_filler = self.doc_len > 1 || self.query_len > 1;
        if needs_filler && self.vocab.n_fillers == 0 {
            return Err(TaskError::VocabTooSmall { what: "filler", available: 0, needed: 1 });
        }
        Ok(())
    }

    /// Length of an encoded instance including the answer and EOS.
    pub fn encoded_len(&self) -> usize {
        // BOS, task, prompt, K × (slot marker + doc), ANS, answer, EOS
        1 + 1 + self.query_len + self.k * (1 + self.doc_len) + 3
    }

    /// Same config with a different candidate count (used for sub-instances).
    pub fn with_k(&self, k: usize) -> TaskConfig {
        TaskConfig { k, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RetrievalInstance {
    pub prompt: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    /// 1-based.
    pub truth_slot: usize,
}

impl RetrievalInstance {
    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    pub fn truth(&self) -> &[usize] {
        &self.candidates[self.truth_slot - 1]
    }
}

/// The token a relevant candidate must contain, per the flavor's rule.
pub fn match_token(cfg: &TaskConfig, prompt: &[usize]) -> Option<usize> {
    match cfg.flavor {
        Flavor::KeyMatch => prompt.first().copied().filter(|t| cfg.vocab.is_key(*t)),
        Flavor::SessionMatch => {
            // the key-partition token that repeats in the prompt
            let keys: Vec<usize> = prompt.iter().copied().filter(|t| cfg.vocab.is_key(*t)).collect();
            keys.iter().copied().find(|t| keys.iter().filter(|u| *u == t).count() >= 2)
        }
    }
}

pub fn is_relevant(cfg: &TaskConfig, prompt: &[usize], candidate: &[usize]) -> bool {
    match_token(cfg, prompt).is_some_and(|m| candidate.contains(&m))
}

/// Brute-force scan of the match predicate; 1-based slots.
pub fn relevant_slots(cfg: &TaskConfig, inst: &RetrievalInstance) -> Vec<usize> {
    inst.candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| is_relevant(cfg, &inst.prompt, c))
        .map(|(i, _)| i + 1)
        .collect()
}

/// One instance with its relevant candidate at `truth_slot` (1-based).
pub fn gen_instance(cfg: &TaskConfig, truth_slot: usize, seed: u64) -> Result<RetrievalInstance, TaskError> {
    cfg.validate()?;
    if truth_slot == 0 || truth_slot > cfg.k {
        return Err(TaskError::SlotOutOfRange { slot: truth_slot, k: cfg.k });
    }
    let v = &cfg.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let key_ids = rand::seq::index::sample(&mut rng, v.n_keys, cfg.k);
    let keys: Vec<usize> = key_ids.iter().map(|j| v.key(j)).collect();
    let filler = |rng: &mut ChaCha8Rng| v.filler(rng.random_range(0..v.n_fillers));

    let target = keys[truth_slot - 1];
    let prompt: Vec<usize> = match cfg.flavor {
        Flavor::KeyMatch => {
            let mut p = vec![target];
            p.extend((1..cfg.query_len).map(|_| filler(&mut rng)));
            p
        }
        Flavor::SessionMatch => (0..cfg.query_len)
            .map(|i| if i % 2 == 0 { target } else { filler(&mut rng) })
            .collect(),
    };

    let candidates = keys
        .iter()
        .map(|&key| {
            let at = match cfg.flavor {
                Flavor::KeyMatch => 0,
                Flavor::SessionMatch => rng.random_range(0..cfg.doc_len),
            };
            (0..cfg.doc_len).map(|i| if i == at { key } else { filler(&mut rng) }).collect()
        })
        .collect();

    Ok(RetrievalInstance { prompt, candidates, truth_slot })
}

/// `n` instances whose truth slots are drawn i.i.d. from `slot_distribution`.
///
/// Instance `i` depends only on `(seed, i)`.
pub fn gen_dataset(
    cfg: &TaskConfig,
    slot_distribution: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<RetrievalInstance>, TaskError> {
    cfg.validate()?;
    if n == 0 {
        return Err(TaskError::EmptyDataset);
    }
    check_distribution(slot_distribution, cfg.k)?;
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, i as u64]));
            let slot = sample_slot(slot_distribution, rng.random::<f64>());
            gen_instance(cfg, slot, derive_seed(seed, &[2, i as u64]))
        })
        .collect()
}

/// Equal shares of every candidate count in `k_min..=cfg.k`, each drawn from
/// [`head_biased_distribution`] with `P(slot 1) = max(head, 1/K)`.
///
/// Block for count `k` uses seed `derive_seed(seed, [k])`.
pub fn gen_mixed_dataset(
    cfg: &TaskConfig,
    k_min: usize,
    head: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<RetrievalInstance>, TaskError> {
    if k_min == 0 || k_min > cfg.k {
        return Err(TaskError::InvalidConfig(format!("k_min {k_min} outside 1..={}", cfg.k)));
    }
    let span = cfg.k - k_min + 1;
    if n < span {
        return Err(TaskError::EmptyDataset);
    }
    let mut out = Vec::with_capacity(n);
    for k in k_min..=cfg.k {
        let dist = head_biased_distribution(k, head.max(1.0 / k as f64));
        out.extend(gen_dataset(&cfg.with_k(k), &dist, n / span, derive_seed(seed, &[k as u64]))?);
    }
    Ok(out)
}

fn check_distribution(dist: &[f64], k: usize) -> Result<(), TaskError> {
    if dist.len() != k {
        return Err(TaskError::BadDistribution(format!("{} probabilities for K = {}", dist.len(), k)));
    }
    if let Some(p) = dist.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(TaskError::BadDistribution(format!("invalid probability {p}")));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(TaskError::BadDistribution(format!("probabilities sum to {total}")));
    }
    Ok(())
}

fn sample_slot(dist: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i + 1;
        }
    }
    // rounding at the top end: last slot with non-zero mass
    dist.iter().rposition(|p| *p > 0.0).map_or(dist.len(), |i| i + 1)
}

/// `P(slot 1) = head`, the remainder spread evenly over slots `2..=k`.
pub fn head_biased_distribution(k: usize, head: f64) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let rest = (1.0 - head) / (k - 1) as f64;
    std::iter::once(head).chain(std::iter::repeat_n(rest, k - 1)).collect()
}

pub fn uniform_distribution(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PermutationScheme {
    Cyclic,
    Random,
}

/// New list `[X_{π(1)}, …, X_{π(K)}]`; `order[j]` is the 1-based source slot
/// placed at new slot `j + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationPlan {
    pub order: Vec<usize>,
    pub scheme: PermutationScheme,
    pub seed: Option<u64>,
}

impl PermutationPlan {
    /// Left rotation by `r`.
    pub fn rotation(k: usize, r: usize) -> Self {
        Self { order: (0..k).map(|j| (j + r) % k + 1).collect(), scheme: PermutationScheme::Cyclic, seed: None }
    }

    pub fn is_bijection(&self) -> bool {
        let k = self.order.len();
        let mut seen = vec![false; k];
        for &s in &self.order {
            if s == 0 || s > k || seen[s - 1] {
                return false;
            }
            seen[s - 1] = true;
        }
        true
    }

    pub fn apply(&self, inst: &RetrievalInstance) -> Result<RetrievalInstance, TaskError> {
        if self.order.len() != inst.k() || !self.is_bijection() {
            return Err(TaskError::Augment(format!(
                "plan {:?} is not a permutation of {} candidates",
                self.order,
                inst.k()
            )));
        }
        let candidates = self.order.iter().map(|&s| inst.candidates[s - 1].clone()).collect();
        let truth_slot = self.order.iter().position(|&s| s == inst.truth_slot).expect("bijection") + 1;
        Ok(RetrievalInstance { prompt: inst.prompt.clone(), candidates, truth_slot })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedInstance {
    /// Index of the source instance.
    pub source: usize,
    pub plan: PermutationPlan,
    pub instance: RetrievalInstance,
}

/// `m` reordered copies of each instance.
///
/// Cyclic copies are left rotations by `0..m`; random copies are distinct
/// permutations drawn per instance from `(seed, index)`.
pub fn permute_augment(
    dataset: &[RetrievalInstance],
    m: usize,
    scheme: PermutationScheme,
    seed: u64,
) -> Result<Vec<AugmentedInstance>, TaskError> {
    if m == 0 {
        return Err(TaskError::Augment("copies per instance must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(dataset.len() * m);
    for (idx, inst) in dataset.iter().enumerate() {
        let k = inst.k();
        let plans: Vec<PermutationPlan> = match scheme {
            PermutationScheme::Cyclic => {
                if m > k {
                    return Err(TaskError::Augment(format!("{m} cyclic copies exceed K = {k} distinct rotations")));
                }
                (0..m).map(|r| PermutationPlan::rotation(k, r)).collect()
            }
            PermutationScheme::Random => {
                if factorial_saturating(k) < m as u128 {
                    return Err(TaskError::Augment(format!("{m} distinct permutations requested but K! = {}", factorial_saturating(k))));
                }
                let s = derive_seed(seed, &[3, idx as u64]);
                distinct_permutations(k, m, s)
                    .into_iter()
                    .map(|order| PermutationPlan { order, scheme, seed: Some(s) })
                    .collect()
            }
        };
        for plan in plans {
            let instance = plan.apply(inst)?;
            out.push(AugmentedInstance { source: idx, plan, instance });
        }
    }
    Ok(out)
}

fn factorial_saturating(k: usize) -> u128 {
    (1..=k as u128).fold(1u128, |acc, x| acc.saturating_mul(x))
}

fn distinct_permutations(k: usize, m: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = factorial_saturating(k);
    if total <= 5040 && (m as u128) * 2 > total {
        // dense request: enumerate everything, shuffle, take a prefix
        let mut all = all_permutations(k);
        all.shuffle(&mut rng);
        all.truncate(m);
        return all;
    }
    let mut seen = HashSet::with_capacity(m);
    let mut out = Vec::with_capacity(m);
    let base: Vec<usize> = (1..=k).collect();
    while out.len() < m {
        let mut p = base.clone();
        p.shuffle(&mut rng);
        if seen.insert(p.clone()) {
            out.push(p);
        }
    }
    out
}

fn all_permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i + 1);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

/// Token sequence for one instance.
///
/// Layout: `[BOS][TASK][P_s][SLOT_1][X_1]…[SLOT_K][X_K][ANS][SLOT_c][EOS]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub tokens: Vec<usize>,
    /// Index of the answer token `SLOT_c` (the position after `ANS`).
    pub answer_index: usize,
    /// Index of each `SLOT_i` marker, strictly increasing.
    pub slot_offsets: Vec<usize>,
}

impl Encoded {
    /// Everything before the answer token: what a predictor gets to see.
    pub fn context(&self) -> &[usize] {
        &self.tokens[..self.answer_index]
    }
}

pub fn encode(inst: &RetrievalInstance, cfg: &TaskConfig) -> Result<Encoded, TaskError> {
    let k = inst.k();
    if k == 0 || k > cfg.vocab.max_slots {
        return Err(TaskError::VocabTooSmall { what: "slot", available: cfg.vocab.max_slots, needed: k });
    }
    if inst.truth_slot == 0 || inst.truth_slot > k {
        return Err(TaskError::SlotOutOfRange { slot: inst.truth_slot, k });
    }
    if inst.prompt.len() != cfg.query_len || inst.candidates.iter().any(|c| c.len() != cfg.doc_len) {
        return Err(TaskError::InvalidConfig("instance does not match query_len/doc_len".into()));
    }
    let v = &cfg.vocab;
    let mut tokens = Vec::with_capacity(cfg.with_k(k).encoded_len());
    tokens.push(vocab::BOS);
    tokens.push(v.task(cfg.flavor.task_index()));
    tokens.extend_from_slice(&inst.prompt);
    let mut slot_offsets = Vec::with_capacity(k);
    for (i, c) in inst.candidates.iter().enumerate() {
        slot_offsets.push(tokens.len());
        tokens.push(v.slot(i + 1));
        tokens.extend_from_slice(c);
    }
    tokens.push(vocab::ANS);
    let answer_index = tokens.len();
    tokens.push(v.slot(inst.truth_slot));
    tokens.push(vocab::EOS);
    Ok(Encoded { tokens, answer_index, slot_offsets })
}

/// Inverse of [`encode`] for a sequence with `k` candidates.
pub fn decode(tokens: &[usize], cfg: &TaskConfig, k: usize) -> Result<RetrievalInstance, TaskError> {
    let c = cfg.with_k(k);
    if tokens.len() != c.encoded_len() {
        return Err(TaskError::Decode(format!("length {} != {}", tokens.len(), c.encoded_len())));
    }
    let v = &cfg.vocab;
    let expect = |pos: usize, tok: usize, what: &str| {
        if tokens[pos] == tok {
            Ok(())
        } else {
            Err(TaskError::Decode(format!("expected {what} at {pos}, found {}", tokens[pos])))
        }
    };
    expect(0, vocab::BOS, "BOS")?;
    expect(1, v.task(cfg.flavor.task_index()), "task token")?;
    let mut pos = 2;
    let prompt = tokens[pos..pos + cfg.query_len].to_vec();
    pos += cfg.query_len;
    let mut candidates = Vec::with_capacity(k);
    for i in 1..=k {
        expect(pos, v.slot(i), "slot marker")?;
        candidates.push(tokens[pos + 1..pos + 1 + cfg.doc_len].to_vec());
        pos += 1 + cfg.doc_len;
    }
    expect(pos, vocab::ANS, "ANS")?;
    let truth_slot = match v.classify(tokens[pos + 1]) {
        TokenKind::Slot(s) if s <= k => s,
        _ => return Err(TaskError::Decode(format!("answer token {} is not a slot label", tokens[pos + 1]))),
    };
    expect(pos + 2, vocab::EOS, "EOS")?;
    Ok(RetrievalInstance { prompt, candidates, truth_slot })
}

/// One line of a dataset file.
///
/// Field order on disk: `id, source, scheme, order, truth_slot, prompt, candidates`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: usize,
    pub source: usize,
    pub scheme: Option<PermutationScheme>,
    pub order: Option<Vec<usize>>,
    pub truth_slot: usize,
    pub prompt: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
}

impl DatasetRecord {
    pub fn plain(id: usize, inst: &RetrievalInstance) -> Self {
        Self {
            id,
            source: id,
            scheme: None,
            order: None,
            truth_slot: inst.truth_slot,
            prompt: inst.prompt.clone(),
            candidates: inst.candidates.clone(),
        }
    }

    pub fn augmented(id: usize, aug: &AugmentedInstance) -> Self {
        Self {
            id,
            source: aug.source,
            scheme: Some(aug.plan.scheme),
            order: Some(aug.plan.order.clone()),
            truth_slot: aug.instance.truth_slot,
            prompt: aug.instance.prompt.clone(),
            candidates: aug.instance.candidates.clone(),
        }
    }

    pub fn instance(&self) -> RetrievalInstance {
        RetrievalInstance { prompt: self.prompt.clone(), candidates: self.candidates.clone(), truth_slot: self.truth_slot }
    }
}

/// Serializes records as UTF-8 JSON lines.
pub fn write_dataset(records: &[DatasetRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn read_dataset(text: &str) -> Result<Vec<DatasetRecord>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}
