//! Position sweeps: place the truth at each slot, tally what the predictor
//! picks, and summarize per-slot accuracy and its spread.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{self, AdapterSpec};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::diff::ParamSet;
use crate::model::{predict_slot, ModelConfig};
use crate::seed::derive_seed;
use crate::task::{encode, gen_instance, RetrievalInstance, TaskConfig, TaskError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("fluctuation needs at least 2 accuracies, got {0}")]
    TooFew(usize),
    #[error("fluctuation is undefined when the mean accuracy is 0")]
    ZeroMean,
    #[error("accuracy {0} is not a finite non-negative number")]
    BadAccuracy(f64),
    #[error("n_per_slot must be at least 1")]
    NoSamples,
    #[error("slot {slot} outside 1..={k}")]
    BadSlot { slot: usize, k: usize },
    #[error("adapter was trained on base {expected}, got {actual}")]
    BaseMismatch { expected: String, actual: String },
    #[error("{0}")]
    Checkpoint(String),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
    #[error("report files disagree: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// `100 · s / mean` with the Bessel-corrected sample deviation `s`.
pub fn fluctuation(accs: &[f64]) -> Result<f64, EvalError> {
    if accs.len() < 2 {
        return Err(EvalError::TooFew(accs.len()));
    }
    if let Some(a) = accs.iter().find(|a| !a.is_finite() || **a < 0.0) {
        return Err(EvalError::BadAccuracy(*a));
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(EvalError::ZeroMean);
    }
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(100.0 * var.sqrt() / mean)
}

/// One predictor answer. `slot: None` is an invalid / unparsable answer.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub slot: Option<usize>,
    /// Restricted-softmax distribution over the K slots, when available.
    pub dist: Option<Vec<f64>>,
}

impl Prediction {
    pub fn slot(slot: usize) -> Self {
        Self { slot: Some(slot), dist: None }
    }

    pub fn invalid() -> Self {
        Self { slot: None, dist: None }
    }
}

/// Anything that picks a slot for an instance. An `Err` is a predictor
/// failure; it is tallied as invalid.
pub trait SlotPredictor: Sync {
    fn predict(&self, inst: &RetrievalInstance, task: &TaskConfig) -> Result<Prediction, String>;
}

impl<F> SlotPredictor for F
where
    F: Fn(&RetrievalInstance) -> Option<usize> + Sync,
{
    fn predict(&self, inst: &RetrievalInstance, _: &TaskConfig) -> Result<Prediction, String> {
        Ok(Prediction { slot: self(inst), dist: None })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub k: usize,
    /// Probed truth slots (1-based), one matrix row each.
    pub slots: Vec<usize>,
    /// `counts[r][i]`: predictions of slot `i + 1` with truth at `slots[r]`;
    /// the last column counts invalid answers.
    pub counts: Vec<Vec<u64>>,
    /// Row-normalized `counts`.
    pub matrix: Vec<Vec<f64>>,
    /// Mean restricted-softmax mass per row (K columns), for local models.
    pub mass: Option<Vec<Vec<f64>>>,
    pub accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// `None` when undefined (fewer than 2 slots or zero mean).
    pub fluctuation: Option<f64>,
    pub n_per_slot: usize,
    /// Slots where every prediction failed.
    pub flagged: Vec<usize>,
    pub provenance: String,
}

impl BiasReport {
    /// Derives every summary field from raw counts.
    pub fn from_counts(
        k: usize,
        slots: Vec<usize>,
        counts: Vec<Vec<u64>>,
        mass: Option<Vec<Vec<f64>>>,
        failures: &[u64],
        provenance: String,
    ) -> Self {
        let n_per_slot = counts.first().map_or(0, |r| r.iter().sum::<u64>() as usize);
        let matrix: Vec<Vec<f64>> = counts
            .iter()
            .map(|row| {
                let total = row.iter().sum::<u64>() as f64;
                row.iter().map(|c| *c as f64 / total).collect()
            })
            .collect();
        let accuracy: Vec<f64> = slots.iter().zip(&matrix).map(|(s, row)| row[s - 1]).collect();
        let mean_accuracy = accuracy.iter().sum::<f64>() / accuracy.len().max(1) as f64;
        let flagged = slots
            .iter()
            .zip(failures)
            .zip(&counts)
            .filter(|((_, f), row)| **f > 0 && **f == row.iter().sum::<u64>())
            .map(|((s, _), _)| *s)
            .collect();
        Self {
            k,
            fluctuation: fluctuation(&accuracy).ok(),
            slots,
            counts,
            matrix,
            mass,
            accuracy,
            mean_accuracy,
            n_per_slot,
            flagged,
            provenance,
        }
    }
}

/// Sweeps the truth over `slots` (all of `1..=K` when `None`), with
/// `n_per_slot` fresh instances each.
///
/// Instance `j` for truth slot `c` uses seed `derive_seed(seed, [c, j])`,
/// so the stream does not depend on scheduling or on which slots are swept.
pub fn probe_positions(
    predictor: &dyn SlotPredictor,
    task: &TaskConfig,
    n_per_slot: usize,
    seed: u64,
    slots: Option<&[usize]>,
    provenance: &str,
) -> Result<BiasReport, EvalError> {
    task.validate()?;
    if n_per_slot == 0 {
        return Err(EvalError::NoSamples);
    }
    let k = task.k;
    let slots: Vec<usize> = slots.map_or_else(|| (1..=k).collect(), |s| s.to_vec());
    if let Some(&slot) = slots.iter().find(|s| **s == 0 || **s > k) {
        return Err(EvalError::BadSlot { slot, k });
    }
    let mut counts = Vec::with_capacity(slots.len());
    let mut mass_rows = Vec::with_capacity(slots.len());
    let mut have_mass = true;
    let mut failures = Vec::with_capacity(slots.len());
    for &c in &slots {
        let instances: Vec<RetrievalInstance> = (0..n_per_slot)
            .map(|j| gen_instance(task, c, derive_seed(seed, &[c as u64, j as u64])))
            .collect::<Result<_, _>>()?;
        let preds: Vec<Result<Prediction, String>> = instances.par_iter().map(|inst| predictor.predict(inst, task)).collect();
        let mut row = vec![0u64; k + 1];
        let mut mass = vec![0.0; k];
        let mut failed = 0;
        for p in preds {
            match p {
                Ok(p) => {
                    match p.slot {
                        Some(s) if (1..=k).contains(&s) => row[s - 1] += 1,
                        _ => row[k] += 1,
                    }
                    match p.dist {
                        Some(d) if d.len() == k => mass.iter_mut().zip(&d).for_each(|(m, x)| *m += x),
                        _ => have_mass = false,
                    }
                }
                Err(_) => {
                    row[k] += 1;
                    failed += 1;
                    have_mass = false;
                }
            }
        }
        mass.iter_mut().for_each(|m| *m /= n_per_slot as f64);
        counts.push(row);
        mass_rows.push(mass);
        failures.push(failed);
    }
    Ok(BiasReport::from_counts(k, slots, counts, have_mass.then_some(mass_rows), &failures, provenance.to_string()))
}

/// Slot predictor backed by a local model checkpoint and optional adapter.
pub struct ModelPredictor {
    model: ModelConfig,
    params: ParamSet<f32>,
    adapter: Option<AdapterSpec>,
}

impl ModelPredictor {
    pub fn base(ck: &Checkpoint) -> Result<Self, EvalError> {
        let CheckpointKind::Model { model } = &ck.kind else {
            return Err(EvalError::Checkpoint("expected a model checkpoint".into()));
        };
        Ok(Self { model: model.clone(), params: ck.params.clone(), adapter: None })
    }

    /// Refuses an adapter trained against a different base.
    pub fn with_adapter(base: &Checkpoint, adapter: &Checkpoint) -> Result<Self, EvalError> {
        let mut p = Self::base(base)?;
        let CheckpointKind::Adapter { spec, base_hash, .. } = &adapter.kind else {
            return Err(EvalError::Checkpoint("expected an adapter checkpoint".into()));
        };
        let actual = base.params.content_hash();
        if *base_hash != actual {
            return Err(EvalError::BaseMismatch { expected: base_hash.clone(), actual });
        }
        p.params.extend(&adapter.params).map_err(|e| EvalError::Checkpoint(e.to_string()))?;
        p.adapter = Some(spec.clone());
        Ok(p)
    }
}

impl SlotPredictor for ModelPredictor {
    fn predict(&self, inst: &RetrievalInstance, task: &TaskConfig) -> Result<Prediction, String> {
        let enc = encode(inst, task).map_err(|e| e.to_string())?;
        let k = inst.k();
        let (soft, lowrank) = match &self.adapter {
            None => (None, None),
            Some(AdapterSpec::LowRank(l)) => (None, Some(l)),
            Some(spec @ (AdapterSpec::LocationEncoding(m) | AdapterSpec::PromptTuning(m))) => {
                let s = adapter::locations_for(m.location, &enc).map_err(|e| e.to_string())?;
                let block = adapter::adapter_forward(spec, &self.params, Some(&s), k).map_err(|e| e.to_string())?;
                (Some(block), None)
            }
        };
        let p = predict_slot(&self.params, &self.model, enc.context(), k, soft.as_ref(), lowrank).map_err(|e| e.to_string())?;
        Ok(Prediction { slot: Some(p.slot), dist: Some(p.dist) })
    }
}

fn io_err(path: &Path, e: impl ToString) -> EvalError {
    EvalError::Io { path: path.display().to_string(), detail: e.to_string() }
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn matrix_rows(slots: &[usize], m: &[Vec<f64>]) -> Vec<Vec<String>> {
    slots
        .iter()
        .zip(m)
        .map(|(s, row)| std::iter::once(s.to_string()).chain(row.iter().map(|v| format!("{v:?}"))).collect())
        .collect()
}

pub fn report_paths(dir: &Path, run_id: &str) -> [PathBuf; 4] {
    [
        dir.join(format!("{run_id}_matrix.csv")),
        dir.join(format!("{run_id}_summary.csv")),
        dir.join(format!("{run_id}_report.json")),
        dir.join(format!("{run_id}_mass.csv")),
    ]
}

/// Writes the matrix CSV, the summary CSV, the JSON summary and, when
/// present, the softmax-mass CSV. Returns the written paths.
pub fn render_report(report: &BiasReport, dir: &Path, run_id: &str) -> Result<Vec<PathBuf>, EvalError> {
    let [matrix_p, summary_p, json_p, mass_p] = report_paths(dir, run_id);
    let k = report.k;
    let mut header: Vec<String> = vec!["truth_slot".into()];
    header.extend((1..=k).map(|i| format!("pred_{i}")));
    header.push("invalid".into());
    write_csv(&matrix_p, &header, &matrix_rows(&report.slots, &report.matrix))?;

    let mut rows: Vec<Vec<String>> =
        report.slots.iter().zip(&report.accuracy).map(|(s, a)| vec![s.to_string(), format!("{a:?}")]).collect();
    rows.push(vec!["mean".into(), format!("{:?}", report.mean_accuracy)]);
    let fl = report.fluctuation.map_or_else(|| "undefined".to_string(), |f| format!("{f:?}"));
    rows.push(vec!["fluctuation".into(), fl]);
    write_csv(&summary_p, &["slot".into(), "accuracy".into()], &rows)?;

    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&json_p, json + "\n").map_err(|e| io_err(&json_p, e))?;
    let mut out = vec![matrix_p, summary_p, json_p];
    if let Some(mass) = &report.mass {
        let mut header: Vec<String> = vec!["truth_slot".into()];
        header.extend((1..=k).map(|i| format!("mass_{i}")));
        write_csv(&mass_p, &header, &matrix_rows(&report.slots, mass))?;
        out.push(mass_p);
    }
    Ok(out)
}

/// Reads a rendered report back and checks the matrix CSV against it.
pub fn load_report(dir: &Path, run_id: &str) -> Result<BiasReport, EvalError> {
    let [matrix_p, _, json_p, _] = report_paths(dir, run_id);
    let text = fs::read_to_string(&json_p).map_err(|e| io_err(&json_p, e))?;
    let report: BiasReport = serde_json::from_str(&text).map_err(|e| io_err(&json_p, e))?;
    let mut r = csv::Reader::from_path(&matrix_p).map_err(|e| io_err(&matrix_p, e))?;
    let mut matrix = Vec::new();
    let mut slots: Vec<usize> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(&matrix_p, e))?;
        let mut fields = rec.iter();
        let slot = fields.next().and_then(|s| s.parse().ok()).ok_or_else(|| io_err(&matrix_p, "bad truth_slot"))?;
        let row: Vec<f64> = fields.map(|f| f.parse().map_err(|e| io_err(&matrix_p, e))).collect::<Result<_, _>>()?;
        slots.push(slot);
        matrix.push(row);
    }
    if slots != report.slots || matrix != report.matrix {
        return Err(EvalError::Inconsistent(format!("{} vs {}", matrix_p.display(), json_p.display())));
    }
    Ok(report)
}
