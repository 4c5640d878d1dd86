//! Prompt builders for endpoint probes, and multi-pass hierarchical
//! selection over any [`SlotPredictor`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::SlotPredictor;
use crate::task::{RetrievalInstance, TaskConfig};

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("no candidates to render")]
    NoCandidates,
    #[error("group count {g} outside 1..={k}")]
    BadGroupCount { g: usize, k: usize },
    #[error("shot {0} has the same candidate set as the evaluated instance")]
    LeakedShot(usize),
    #[error("shot {shot} answer {answer} outside 1..={k}")]
    BadShotAnswer { shot: usize, answer: usize, k: usize },
    #[error("{wanted} shots requested, {have} available")]
    NotEnoughShots { wanted: usize, have: usize },
    #[error("{pass} (group {group}): {detail}")]
    Predictor { pass: &'static str, group: usize, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "n", rename_all = "kebab-case")]
pub enum Strategy {
    ZeroShot,
    FewShot(usize),
    Hierarchical(usize),
}

/// Shot counts studied for few-shot prompting.
pub const FEW_SHOT_COUNTS: [usize; 3] = [1, 3, 5];

/// Text-level view of one instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    /// Opening task line.
    pub task: String,
    pub history: Vec<String>,
    pub candidates: Vec<String>,
    /// Capitalized item noun used in labels, e.g. `Product` or `Paper`.
    pub noun: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolvedExample {
    pub instance: PromptInstance,
    /// 1-based.
    pub answer: usize,
}

impl PromptInstance {
    /// Renders a synthetic instance with token ids as text.
    pub fn from_tokens(inst: &RetrievalInstance, noun: &str) -> Self {
        let words = |ts: &[usize]| ts.iter().map(|t| format!("t{t}")).collect::<Vec<_>>().join(" ");
        Self {
            task: format!("Pick the {} that matches the query.", noun.to_lowercase()),
            history: vec![words(&inst.prompt)],
            candidates: inst.candidates.iter().map(|c| words(c)).collect(),
            noun: noun.to_string(),
        }
    }

    pub fn label(&self, i: usize) -> String {
        format!("Potential {} [{i}]", self.noun)
    }

    fn plural(&self) -> String {
        format!("{}s", self.noun.to_lowercase())
    }
}

fn body(inst: &PromptInstance, extra: Option<&str>) -> Result<String, PromptError> {
    let k = inst.candidates.len();
    if k == 0 {
        return Err(PromptError::NoCandidates);
    }
    let mut s = String::new();
    s.push_str(&inst.task);
    s.push('\n');
    if !inst.history.is_empty() {
        s.push_str("History:\n");
        for (i, h) in inst.history.iter().enumerate() {
            s.push_str(&format!("{}. {h}\n", i + 1));
        }
    }
    s.push_str(&format!("Belows are {k} potential {} to consider:\n", inst.plural()));
    for (i, c) in inst.candidates.iter().enumerate() {
        s.push_str(&format!("{}({c})\n", inst.label(i + 1)));
    }
    if let Some(extra) = extra {
        s.push_str(extra);
        s.push('\n');
    }
    s.push_str(&format!(
        "Which {} is most relevant? Reply with its label, for example {}.",
        inst.noun.to_lowercase(),
        inst.label(1)
    ));
    Ok(s)
}

pub fn build_zero_shot(inst: &PromptInstance) -> Result<String, PromptError> {
    body(inst, None)
}

fn same_candidate_set(a: &[String], b: &[String]) -> bool {
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort();
    b.sort();
    a == b
}

/// Solved examples first, then the zero-shot body. With no shots the
/// output equals [`build_zero_shot`].
pub fn build_few_shot(inst: &PromptInstance, shots: &[SolvedExample]) -> Result<String, PromptError> {
    let main = body(inst, None)?;
    if shots.is_empty() {
        return Ok(main);
    }
    let mut s = format!("Belows are {} examples:\n", shots.len());
    for (j, shot) in shots.iter().enumerate() {
        if same_candidate_set(&shot.instance.candidates, &inst.candidates) {
            return Err(PromptError::LeakedShot(j + 1));
        }
        let k = shot.instance.candidates.len();
        if shot.answer == 0 || shot.answer > k {
            return Err(PromptError::BadShotAnswer { shot: j + 1, answer: shot.answer, k });
        }
        s.push_str(&format!("Example [{}]\n", j + 1));
        s.push_str(&body(&shot.instance, None)?);
        s.push_str(&format!("\nAnswer: {}\n\n", shot.instance.label(shot.answer)));
    }
    s.push_str("Now the actual question.\n");
    s.push_str(&main);
    Ok(s)
}

/// Contiguous 1-based label ranges; the first `K mod G` groups get one
/// extra member.
pub fn group_ranges(k: usize, g: usize) -> Result<Vec<(usize, usize)>, PromptError> {
    if g == 0 || g > k {
        return Err(PromptError::BadGroupCount { g, k });
    }
    let (base, extra) = (k / g, k % g);
    let mut out = Vec::with_capacity(g);
    let mut start = 1;
    for i in 0..g {
        let size = base + usize::from(i < extra);
        out.push((start, start + size - 1));
        start += size;
    }
    Ok(out)
}

pub fn build_hierarchical(inst: &PromptInstance, g: usize) -> Result<String, PromptError> {
    let k = inst.candidates.len();
    if k == 0 {
        return Err(PromptError::NoCandidates);
    }
    let ranges = group_ranges(k, g)?;
    let spans: Vec<String> = ranges.iter().map(|(a, b)| format!("([{a}]-[{b}])")).collect();
    let block = format!(
        "Work in two rounds. Split the list into {g} groups: {}. First choose the best {} within each group, then choose the final answer among those {g} picks.",
        spans.join(", "),
        inst.noun.to_lowercase()
    );
    body(inst, Some(&block))
}

/// The first `n` examples of `pool` whose candidate set differs from `inst`'s.
pub fn select_shots(inst: &PromptInstance, pool: &[SolvedExample], n: usize) -> Result<Vec<SolvedExample>, PromptError> {
    let picked: Vec<SolvedExample> = pool
        .iter()
        .filter(|s| !same_candidate_set(&s.instance.candidates, &inst.candidates))
        .take(n)
        .cloned()
        .collect();
    if picked.len() < n {
        return Err(PromptError::NotEnoughShots { wanted: n, have: picked.len() });
    }
    Ok(picked)
}

/// Renders `inst` under `strategy`; few-shot draws from `shots` via [`select_shots`].
pub fn build(strategy: Strategy, inst: &PromptInstance, shots: &[SolvedExample]) -> Result<String, PromptError> {
    match strategy {
        Strategy::ZeroShot => build_zero_shot(inst),
        Strategy::FewShot(n) => build_few_shot(inst, &select_shots(inst, shots, n)?),
        Strategy::Hierarchical(g) => build_hierarchical(inst, g),
    }
}

fn sub_instance(inst: &RetrievalInstance, members: &[usize]) -> RetrievalInstance {
    // truth relabeled when it is a member; otherwise a placeholder, since
    // predictors must not rely on it
    let truth = members.iter().position(|m| *m == inst.truth_slot).map_or(1, |p| p + 1);
    RetrievalInstance {
        prompt: inst.prompt.clone(),
        candidates: members.iter().map(|m| inst.candidates[m - 1].clone()).collect(),
        truth_slot: truth,
    }
}

fn ask(
    predictor: &dyn SlotPredictor,
    inst: &RetrievalInstance,
    task: &TaskConfig,
    pass: &'static str,
    group: usize,
) -> Result<usize, PromptError> {
    let err = |detail: String| PromptError::Predictor { pass, group, detail };
    let p = predictor.predict(inst, &task.with_k(inst.k())).map_err(err)?;
    match p.slot {
        Some(s) if (1..=inst.k()).contains(&s) => Ok(s),
        Some(s) => Err(err(format!("slot {s} outside 1..={}", inst.k()))),
        None => Err(err("invalid answer".into())),
    }
}

/// Two passes: a winner per group, then a winner among winners, mapped back
/// to the original 1-based slot. Singleton groups need no call.
pub fn hierarchical_infer(
    predictor: &dyn SlotPredictor,
    inst: &RetrievalInstance,
    task: &TaskConfig,
    g: usize,
) -> Result<usize, PromptError> {
    let ranges = group_ranges(inst.k(), g)?;
    let winners: Vec<usize> = ranges
        .par_iter()
        .enumerate()
        .map(|(gi, &(a, b))| {
            let members: Vec<usize> = (a..=b).collect();
            if members.len() == 1 {
                return Ok(a);
            }
            let local = ask(predictor, &sub_instance(inst, &members), task, "pass 1", gi + 1)?;
            Ok(members[local - 1])
        })
        .collect::<Result<_, PromptError>>()?;
    if winners.len() == 1 {
        return Ok(winners[0]);
    }
    let fin = ask(predictor, &sub_instance(inst, &winners), task, "pass 2", 0)?;
    Ok(winners[fin - 1])
}
