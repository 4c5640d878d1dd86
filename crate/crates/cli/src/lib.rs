//! `posbias` command surface. Every stage reads one TOML run config and
//! writes under `<out_dir>/<run_id>/`.
//!
//! Exit codes: 0 success, 1 stage failure, 2 usage or config error.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use posbias_core::adapter::count_tunable;
use posbias_core::checkpoint::{Checkpoint, CheckpointKind};
use posbias_core::eval::{self, fluctuation, probe_positions, render_report, BiasReport, ModelPredictor};
use posbias_core::prompt::{build, PromptInstance, SolvedExample, Strategy};
use posbias_core::seed::derive_seed;
use posbias_core::task::{
    gen_dataset, gen_instance, gen_mixed_dataset, head_biased_distribution, permute_augment, read_dataset,
    uniform_distribution, write_dataset, DatasetRecord, RetrievalInstance,
};
use posbias_core::train::{finetune, pretrain, JsonlSink};
use posbias_probe::{run_probe, Endpoint, ProbeItem, ProbeOptions};
use serde_json::json;
use sha2::{Digest, Sha256};

pub use config::RunConfig;

// seed-derivation paths under the master seed
const SEED_PRETRAIN_DATA: u64 = 1;
const SEED_FINETUNE_DATA: u64 = 2;
const SEED_AUGMENT: u64 = 3;
const SEED_EVAL: u64 = 4;
const SEED_PROBE: u64 = 5;
const SEED_SHOTS: u64 = 6;

#[derive(Parser, Debug)]
#[command(name = "posbias", version, about = "Positional-bias lab: data, training, adapters and per-slot probes")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// Run config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides `paths.out_dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate pretraining data and the permutation-augmented finetuning set.
    GenData(ConfigArgs),
    /// Train the base model.
    Pretrain(ConfigArgs),
    /// Train the configured adapter over the frozen base.
    Finetune(ConfigArgs),
    /// Per-slot accuracy sweep of the base, or of base plus adapter.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        adapter: bool,
    },
    /// Probe a chat-completion endpoint.
    Probe(ConfigArgs),
    /// Print a stored report.
    Report {
        /// Directory holding report files.
        #[arg(long)]
        dir: PathBuf,
        /// Report id, e.g. `base` or `le`.
        #[arg(long)]
        id: String,
    },
    /// Fluctuation (percent) of per-slot accuracies.
    Fluctuation {
        #[arg(long, value_delimiter = ',', num_args = 1.., allow_hyphen_values = true)]
        accs: Vec<f64>,
    },
}

enum Failure {
    Usage(String),
    Stage(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Stage(e)
    }
}

/// Runs one invocation and returns its exit code.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.cmd, &args, out) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
        Err(Failure::Stage(e)) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

fn load(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&args.config).map_err(Failure::Usage)?;
    if let Some(dir) = &args.out_dir {
        cfg.paths.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn dispatch(cmd: Command, argv: &[String], out: &mut dyn Write) -> Result<(), Failure> {
    let line = match cmd {
        Command::Fluctuation { accs } => {
            let f = fluctuation(&accs).map_err(|e| Failure::Usage(e.to_string()))?;
            format!("{f:.2}")
        }
        Command::Report { dir, id } => {
            let r = eval::load_report(&dir, &id).map_err(|e| anyhow!(e))?;
            summarize(&r)
        }
        Command::GenData(a) => {
            let cfg = load(&a)?;
            Stage::new(&cfg, "gen-data", argv).run(|s| gen_data(&cfg, s))?
        }
        Command::Pretrain(a) => {
            let cfg = load(&a)?;
            Stage::new(&cfg, "pretrain", argv).run(|s| stage_pretrain(&cfg, s))?
        }
        Command::Finetune(a) => {
            let cfg = load(&a)?;
            if cfg.adapter.is_none() {
                return Err(Failure::Usage("config has no [adapter] section".into()));
            }
            let name = format!("finetune-{}", cfg.adapter.as_ref().expect("checked").tag());
            Stage::new(&cfg, &name, argv).run(|s| stage_finetune(&cfg, s))?
        }
        Command::Eval { args, adapter } => {
            let cfg = load(&args)?;
            let id = match (&cfg.adapter, adapter) {
                (_, false) => "base".to_string(),
                (Some(spec), true) => spec.tag().to_string(),
                (None, true) => return Err(Failure::Usage("--adapter needs an [adapter] section".into())),
            };
            Stage::new(&cfg, &format!("eval-{id}"), argv).run(|s| stage_eval(&cfg, &id, s))?
        }
        Command::Probe(a) => {
            let cfg = load(&a)?;
            if cfg.probe.is_none() {
                return Err(Failure::Usage("config has no [probe] section".into()));
            }
            Stage::new(&cfg, "probe", argv).run(|s| stage_probe(&cfg, s))?
        }
    };
    let _ = writeln!(out, "{line}");
    Ok(())
}

fn summarize(r: &BiasReport) -> String {
    let accs: Vec<String> = r.slots.iter().zip(&r.accuracy).map(|(s, a)| format!("{s}:{a:.3}")).collect();
    let fl = r.fluctuation.map_or("undefined".to_string(), |f| format!("{f:.2}"));
    format!("{} K={} mean={:.4} fluctuation={fl} acc=[{}]", r.provenance, r.k, r.mean_accuracy, accs.join(" "))
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| path.display().to_string())?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Tracks one stage's outputs. Outputs are never overwritten; a sidecar
/// `meta/<stage>.json` records timestamps and file hashes.
struct Stage<'a> {
    cfg: &'a RunConfig,
    name: String,
    argv: &'a [String],
    /// Reserved outputs; `false` marks one the stage may legitimately skip.
    outputs: Vec<(PathBuf, bool)>,
}

impl<'a> Stage<'a> {
    fn new(cfg: &'a RunConfig, name: &str, argv: &'a [String]) -> Self {
        Self { cfg, name: name.to_string(), argv, outputs: Vec::new() }
    }

    fn dir(&self) -> PathBuf {
        self.cfg.run_dir()
    }

    fn meta_path(&self) -> PathBuf {
        self.dir().join("meta").join(format!("{}.json", self.name))
    }

    /// Reserves an output path relative to the run dir.
    fn output(&mut self, rel: &str) -> anyhow::Result<PathBuf> {
        self.reserve(rel, true)
    }

    fn optional_output(&mut self, rel: &str) -> anyhow::Result<PathBuf> {
        self.reserve(rel, false)
    }

    fn reserve(&mut self, rel: &str, required: bool) -> anyhow::Result<PathBuf> {
        let p = self.dir().join(rel);
        if p.exists() {
            bail!("{} already exists; run directories are append-only, use a new run_id", p.display());
        }
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| parent.display().to_string())?;
        }
        self.outputs.push((p.clone(), required));
        Ok(p)
    }

    fn input(&self, rel: &str) -> anyhow::Result<PathBuf> {
        let p = self.dir().join(rel);
        if !p.exists() {
            bail!("missing input {}; run the earlier stage first", p.display());
        }
        Ok(p)
    }

    fn run(mut self, body: impl FnOnce(&mut Self) -> anyhow::Result<String>) -> Result<String, Failure> {
        if self.meta_path().exists() {
            return Err(Failure::Stage(anyhow!(
                "stage {} already ran in {}; use a new run_id",
                self.name,
                self.dir().display()
            )));
        }
        let started = chrono::Utc::now();
        let line = body(&mut self)?;
        let files: Vec<_> = self
            .outputs
            .iter()
            .filter(|(p, required)| *required || p.exists())
            .map(|(p, _)| {
                let rel = p.strip_prefix(self.dir()).unwrap_or(p).display().to_string();
                Ok(json!({ "path": rel, "sha256": sha256_file(p)? }))
            })
            .collect::<anyhow::Result<_>>()?;
        let meta = json!({
            "stage": self.name,
            "argv": self.argv,
            "started": started.to_rfc3339(),
            "finished": chrono::Utc::now().to_rfc3339(),
            "config": self.cfg,
            "outputs": files,
        });
        let path = self.meta_path();
        fs::create_dir_all(path.parent().expect("has parent")).with_context(|| path.display().to_string())?;
        fs::write(&path, serde_json::to_string_pretty(&meta).expect("json")).with_context(|| path.display().to_string())?;
        Ok(line)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| path.display().to_string())
}

fn load_records(path: &Path) -> anyhow::Result<Vec<RetrievalInstance>> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let recs = read_dataset(&text).with_context(|| path.display().to_string())?;
    Ok(recs.iter().map(DatasetRecord::instance).collect())
}

fn gen_data(cfg: &RunConfig, s: &mut Stage) -> anyhow::Result<String> {
    let pre_path = s.output("data/pretrain.jsonl")?;
    let ft_path = s.output("data/finetune.jsonl")?;
    let d = &cfg.data;
    let k = cfg.task.k;
    let pre_seed = derive_seed(cfg.seed, &[SEED_PRETRAIN_DATA]);
    let pre = match d.k_min {
        Some(k_min) if k_min < k => gen_mixed_dataset(&cfg.task, k_min, d.head, d.pretrain_n, pre_seed)?,
        _ => gen_dataset(&cfg.task, &head_biased_distribution(k, d.head), d.pretrain_n, pre_seed)?,
    };
    let src = gen_dataset(
        &cfg.task,
        &head_biased_distribution(k, d.head),
        d.finetune_n,
        derive_seed(cfg.seed, &[SEED_FINETUNE_DATA]),
    )?;
    let aug = permute_augment(&src, cfg.augment_m(), d.scheme, derive_seed(cfg.seed, &[SEED_AUGMENT]))?;
    let pre_recs: Vec<_> = pre.iter().enumerate().map(|(i, x)| DatasetRecord::plain(i, x)).collect();
    let ft_recs: Vec<_> = aug.iter().enumerate().map(|(i, x)| DatasetRecord::augmented(i, x)).collect();
    write_file(&pre_path, write_dataset(&pre_recs).as_bytes())?;
    write_file(&ft_path, write_dataset(&ft_recs).as_bytes())?;
    Ok(format!("gen-data: {} pretrain, {} finetune records in {}", pre_recs.len(), ft_recs.len(), s.dir().display()))
}

fn stage_pretrain(cfg: &RunConfig, s: &mut Stage) -> anyhow::Result<String> {
    let data = load_records(&s.input("data/pretrain.jsonl")?)?;
    let ck_path = s.output("base.pblb")?;
    let log_path = s.output("metrics/pretrain.jsonl")?;
    let log = fs::File::create(&log_path).with_context(|| log_path.display().to_string())?;
    let mut sink = JsonlSink(std::io::BufWriter::new(log));
    let ck = pretrain(&cfg.model, &cfg.task, &data, &cfg.pretrain, &mut sink)?;
    sink.0.flush().with_context(|| log_path.display().to_string())?;
    ck.save(&ck_path)?;
    Ok(format!("pretrain: {} steps, checkpoint {} sha256 {}", ck.steps, ck_path.display(), ck.file_hash()))
}

fn stage_finetune(cfg: &RunConfig, s: &mut Stage) -> anyhow::Result<String> {
    let spec = cfg.adapter.as_ref().expect("checked");
    let base = Checkpoint::load(&s.input("base.pblb")?)?;
    if base.kind.model_config() != &cfg.model {
        bail!("base checkpoint was trained with a different model config");
    }
    let data = load_records(&s.input("data/finetune.jsonl")?)?;
    let tag = spec.tag();
    let ck_path = s.output(&format!("adapter-{tag}.pblb"))?;
    let log_path = s.output(&format!("metrics/finetune-{tag}.jsonl"))?;
    let audit_path = s.output(&format!("audit/finetune-{tag}.json"))?;
    let log = fs::File::create(&log_path).with_context(|| log_path.display().to_string())?;
    let mut sink = JsonlSink(std::io::BufWriter::new(log));
    let res = finetune(&base, spec, &cfg.task, &data, &cfg.finetune, &mut sink)?;
    sink.0.flush().with_context(|| log_path.display().to_string())?;
    let tunable = count_tunable(spec, &cfg.model);
    let audit = json!({
        "adapter": tag,
        "count_tunable": tunable,
        "updated_scalars": res.updated_scalars,
        "base_hash_before": res.base_hash_before,
        "base_hash_after": res.base_hash_after,
    });
    write_file(&audit_path, serde_json::to_string_pretty(&audit).expect("json").as_bytes())?;
    res.adapter.save(&ck_path)?;
    if res.base_hash_before != res.base_hash_after {
        bail!("base parameters changed during finetuning");
    }
    if res.updated_scalars != tunable {
        bail!("{} scalars updated, expected {tunable}", res.updated_scalars);
    }
    Ok(format!("finetune: {tag} adapter {} ({tunable} tunable scalars, base unchanged)", ck_path.display()))
}

/// The mass CSV exists only for predictors that expose distributions.
fn reserve_report(s: &mut Stage, reports: &Path, id: &str) -> anyhow::Result<()> {
    let [matrix, summary, json, mass] = eval::report_paths(reports, id);
    for p in [matrix, summary, json] {
        s.output(&p.strip_prefix(s.dir()).expect("under run dir").display().to_string())?;
    }
    s.optional_output(&mass.strip_prefix(s.dir()).expect("under run dir").display().to_string())?;
    Ok(())
}

fn stage_eval(cfg: &RunConfig, id: &str, s: &mut Stage) -> anyhow::Result<String> {
    let base = Checkpoint::load(&s.input("base.pblb")?)?;
    let predictor = if id == "base" {
        ModelPredictor::base(&base)?
    } else {
        let ad = Checkpoint::load(&s.input(&format!("adapter-{id}.pblb"))?)?;
        match &ad.kind {
            CheckpointKind::Adapter { spec, .. } if Some(spec) == cfg.adapter.as_ref() => {}
            _ => bail!("adapter-{id}.pblb does not match the configured adapter"),
        }
        ModelPredictor::with_adapter(&base, &ad)?
    };
    let reports = s.dir().join("reports");
    reserve_report(s, &reports, id)?;
    let report = probe_positions(
        &predictor,
        &cfg.task,
        cfg.eval.n_per_slot,
        derive_seed(cfg.seed, &[SEED_EVAL]),
        cfg.eval.slots.as_deref(),
        id,
    )?;
    render_report(&report, &reports, id)?;
    Ok(format!("eval: {}", summarize(&report)))
}

fn stage_probe(cfg: &RunConfig, s: &mut Stage) -> anyhow::Result<String> {
    let p = cfg.probe.as_ref().expect("checked");
    let k = cfg.task.k;
    let id = match p.strategy {
        Strategy::ZeroShot => "probe-zero-shot".to_string(),
        Strategy::FewShot(n) => format!("probe-few-shot-{n}"),
        Strategy::Hierarchical(g) => format!("probe-hierarchical-{g}"),
    };
    let reports = s.dir().join("reports");
    reserve_report(s, &reports, &id)?;
    let transcript = s.output(&format!("transcripts/{id}.jsonl"))?;

    let n_shots = match p.strategy {
        Strategy::FewShot(n) => n,
        _ => 0,
    };
    let uniform = uniform_distribution(k);
    let shots: Vec<SolvedExample> = if n_shots > 0 {
        // spare examples so each item can skip shots sharing its candidate set
        gen_dataset(&cfg.task, &uniform, 4 * n_shots + 8, derive_seed(cfg.seed, &[SEED_SHOTS]))?
            .iter()
            .map(|x| SolvedExample { instance: PromptInstance::from_tokens(x, &p.noun), answer: x.truth_slot })
            .collect()
    } else {
        Vec::new()
    };
    let slots: Vec<usize> = cfg.eval.slots.clone().unwrap_or_else(|| (1..=k).collect());
    let mut items = Vec::with_capacity(slots.len() * p.n_per_slot);
    for &c in &slots {
        for j in 0..p.n_per_slot {
            let inst = gen_instance(&cfg.task, c, derive_seed(cfg.seed, &[SEED_PROBE, c as u64, j as u64]))?;
            let prompt = build(p.strategy, &PromptInstance::from_tokens(&inst, &p.noun), &shots)?;
            items.push(ProbeItem { truth_slot: c, prompt });
        }
    }
    let endpoint = Endpoint::new(p.endpoint.clone())?;
    let opts = ProbeOptions {
        k,
        pattern: p.pattern().map_err(|e| anyhow!(e))?,
        strict: p.strict,
        transcript: Some(transcript),
        provenance: format!("{} {}", p.endpoint.model, id),
    };
    let rt = tokio::runtime::Runtime::new().context("tokio runtime")?;
    let report = rt.block_on(run_probe(&endpoint, &items, &opts))?;
    render_report(&report, &reports, &id)?;
    Ok(format!("probe: {}", summarize(&report)))
}
