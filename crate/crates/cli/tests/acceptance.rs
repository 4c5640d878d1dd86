//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use posbias_core::adapter::{count_tunable, Activation, AdapterSpec, LocationMode, MlpSpec};
use posbias_core::eval::{fluctuation, load_report, BiasReport};
use posbias_core::gradsuite;
use posbias_core::model::{ModelConfig, PositionInit, PositionalScheme};
use posbias_core::task::{
    gen_dataset, head_biased_distribution, permute_augment, Flavor, PermutationScheme, TaskConfig,
};
use posbias_core::vocab::Vocab;
use posbias_probe::{run_probe, Endpoint, EndpointConfig, ProbeError, ProbeItem, ProbeOptions};
use serde_json::{json, Value};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cli(args: &[&str]) -> Result<String, String> {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = posbias_cli::run(std::iter::once("posbias").chain(args.iter().copied()), &mut out, &mut err);
    if code == 0 {
        Ok(String::from_utf8_lossy(&out).trim().to_string())
    } else {
        Err(format!("posbias {} exited {code}: {}", args.join(" "), String::from_utf8_lossy(&err).trim()))
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

// Accuracy columns and fluctuation from the published results table.
const TABLE: [([f64; 6], f64); 16] = [
    ([0.329, 0.249, 0.211, 0.205, 0.171, 0.341], 27.78),
    ([0.832, 0.714, 0.708, 0.723, 0.715, 0.736], 6.38),
    ([0.854, 0.731, 0.748, 0.745, 0.767, 0.752], 5.82),
    ([0.864, 0.816, 0.808, 0.823, 0.815, 0.836], 2.47),
    ([0.855, 0.083, 0.211, 0.205, 0.171, 0.341], 89.76),
    ([0.881, 0.698, 0.701, 0.745, 0.767, 0.741], 8.88),
    ([0.883, 0.746, 0.738, 0.798, 0.807, 0.765], 6.77),
    ([0.855, 0.836, 0.818, 0.833, 0.825, 0.855], 1.83),
    ([0.016, 0.112, 0.147, 0.168, 0.051, 0.022], 75.97),
    ([0.698, 0.708, 0.742, 0.760, 0.718, 0.742], 3.26),
    ([0.755, 0.754, 0.763, 0.781, 0.773, 0.763], 1.37),
    ([0.829, 0.810, 0.815, 0.809, 0.816, 0.825], 0.99),
    ([0.257, 0.208, 0.119, 0.166, 0.096, 0.104], 40.58),
    ([0.757, 0.721, 0.709, 0.741, 0.761, 0.771], 3.27),
    ([0.744, 0.774, 0.773, 0.769, 0.760, 0.783], 1.77),
    ([0.824, 0.824, 0.823, 0.841, 0.843, 0.853], 1.52),
];

fn metric_fidelity() -> Outcome {
    let mut worst = 0.0f64;
    for (accs, want) in TABLE {
        let got = fluctuation(&accs).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
    }
    check(worst <= 0.05, format!("{} rows, max |deviation| {worst:.4} pp", TABLE.len()))
}

fn parameter_counts() -> Outcome {
    let mlp = MlpSpec { input_dim: 1, hidden_dim: 1024, output_dim: 5120, activation: Activation::Tanh, location: LocationMode::Offset };
    let model = ModelConfig {
        vocab: Vocab { max_slots: 20, n_keys: 20, n_fillers: 1 },
        d_model: 5120,
        n_layers: 1,
        n_heads: 40,
        d_ff: 1,
        max_seq_len: 64,
        positional: PositionalScheme::LearnedAbsolute,
        position_init: PositionInit::Normal,
    };
    let le = count_tunable(&AdapterSpec::LocationEncoding(mlp.clone()), &model);
    let pt = count_tunable(&AdapterSpec::PromptTuning(mlp), &model);
    check(le == 5_250_048 && pt == le, format!("LE {le}, PT {pt}"))
}

fn gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut name = "";
    let cases: Vec<_> = gradsuite::op_cases().into_iter().chain(gradsuite::composite_cases()).collect();
    for case in &cases {
        let e = gradsuite::worst(case, 20)?;
        if e > worst {
            worst = e;
            name = case.name;
        }
    }
    check(worst < 1e-4, format!("{} cases x 20 instances, max relative error {worst:.2e} ({name})", cases.len()))
}

/// Shared state of the toy pipeline (criteria 4 to 6).
struct Toy {
    base: BiasReport,
    le: BiasReport,
    pt: BiasReport,
    audits: Vec<Value>,
}

fn toy_pipeline(out: &Path) -> Result<Toy, String> {
    let le_cfg = configs_dir().join("toy.toml");
    let text = fs::read_to_string(&le_cfg).map_err(|e| e.to_string())?;
    let pt_text = text.replace("kind = \"location-encoding\"", "kind = \"prompt-tuning\"");
    fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let pt_cfg = out.join("toy-pt.toml");
    fs::write(&pt_cfg, pt_text).map_err(|e| e.to_string())?;
    let (le, pt, o) = (le_cfg.to_str().unwrap(), pt_cfg.to_str().unwrap(), out.to_str().unwrap());
    for args in [
        vec!["gen-data", "-c", le, "--out-dir", o],
        vec!["pretrain", "-c", le, "--out-dir", o],
        vec!["eval", "-c", le, "--out-dir", o],
        vec!["finetune", "-c", le, "--out-dir", o],
        vec!["eval", "--adapter", "-c", le, "--out-dir", o],
        vec!["finetune", "-c", pt, "--out-dir", o],
        vec!["eval", "--adapter", "-c", pt, "--out-dir", o],
    ] {
        let t = Instant::now();
        let line = cli(&args)?;
        eprintln!("  [{:>6.1}s] {line}", t.elapsed().as_secs_f64());
    }
    let run = out.join("toy");
    let reports = run.join("reports");
    let load = |id: &str| load_report(&reports, id).map_err(|e| e.to_string());
    let audits = ["le", "pt"]
        .iter()
        .map(|tag| {
            let p = run.join(format!("audit/finetune-{tag}.json"));
            serde_json::from_str(&fs::read_to_string(&p).map_err(|e| e.to_string())?).map_err(|e| e.to_string())
        })
        .collect::<Result<_, String>>()?;
    Ok(Toy { base: load("base")?, le: load("le")?, pt: load("pt")?, audits })
}

fn fl(r: &BiasReport) -> f64 {
    r.fluctuation.unwrap_or(f64::NAN)
}

fn bias_induction(toy: &Toy) -> Outcome {
    let b = &toy.base;
    let acc1 = b.accuracy[0];
    check(
        b.n_per_slot >= 200 && b.k == 10 && acc1 > b.mean_accuracy && fl(b) > 30.0,
        format!("n/slot {}, acc(1) {acc1:.3}, mean {:.3}, fluctuation {:.2}%", b.n_per_slot, b.mean_accuracy, fl(b)),
    )
}

fn mitigation(toy: &Toy) -> Outcome {
    let (b, le, pt) = (&toy.base, &toy.le, &toy.pt);
    let reduction = 100.0 * (1.0 - fl(le) / fl(b));
    let ok = fl(le) <= 0.5 * fl(b) && le.mean_accuracy >= b.mean_accuracy && fl(pt) < fl(b) && fl(le) <= fl(pt);
    check(
        ok,
        format!(
            "fluctuation base {:.2}% -> LE {:.2}% ({reduction:.1}% lower), PT {:.2}%; mean base {:.3}, LE {:.3}, PT {:.3}",
            fl(b),
            fl(le),
            fl(pt),
            b.mean_accuracy,
            le.mean_accuracy,
            pt.mean_accuracy
        ),
    )
}

fn frozen_base(toy: &Toy) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for a in &toy.audits {
        let same = a["base_hash_before"] == a["base_hash_after"] && a["base_hash_before"].as_str().is_some_and(|s| !s.is_empty());
        let counted = a["updated_scalars"] == a["count_tunable"];
        ok &= same && counted;
        parts.push(format!("{}: base hash {}, {} of {} scalars updated", a["adapter"], if same { "unchanged" } else { "CHANGED" }, a["updated_scalars"], a["count_tunable"]));
    }
    check(ok && toy.audits.len() == 2, parts.join("; "))
}

fn permutation_coverage() -> Outcome {
    let mut sources = 0;
    for (k, flavor, q) in [(10, Flavor::KeyMatch, 1), (7, Flavor::SessionMatch, 3), (1, Flavor::KeyMatch, 2)] {
        let task = TaskConfig { k, doc_len: 2, query_len: q, flavor, vocab: Vocab { max_slots: 10, n_keys: 12, n_fillers: 5 }, seed: 0 };
        let src = gen_dataset(&task, &head_biased_distribution(k, 0.5), 200, k as u64).map_err(|e| e.to_string())?;
        let aug = permute_augment(&src, k, PermutationScheme::Cyclic, 0).map_err(|e| e.to_string())?;
        for (s, copies) in src.iter().zip(aug.chunks(k)) {
            sources += 1;
            let mut seen = vec![vec![0usize; k]; k];
            for a in copies {
                for (slot, cand) in a.instance.candidates.iter().enumerate() {
                    let orig = s.candidates.iter().position(|c| c == cand).ok_or("candidate not from source")?;
                    seen[orig][slot] += 1;
                }
                // brute-force rescan: a candidate matches when it holds a key token from the prompt
                let rescan: Vec<usize> = (1..=k)
                    .filter(|&i| a.instance.prompt.iter().any(|t| task.vocab.is_key(*t) && a.instance.candidates[i - 1].contains(t)))
                    .collect();
                if rescan != vec![a.instance.truth_slot] {
                    return Err(format!("truth relabel mismatch: rescan {rescan:?}, label {}", a.instance.truth_slot));
                }
            }
            if seen.iter().any(|row| row.iter().any(|&n| n != 1)) {
                return Err("a candidate missed or repeated a slot".into());
            }
        }
    }
    Ok(format!("{sources} source instances, every candidate in every slot exactly once, truth labels match rescan"))
}

struct Mock {
    script: Mutex<VecDeque<u16>>,
    answer: Box<dyn Fn(&str) -> String + Send + Sync>,
    hits: AtomicUsize,
}

async fn chat(State(m): State<Arc<Mock>>, Json(body): Json<Value>) -> Response {
    m.hits.fetch_add(1, Ordering::SeqCst);
    if let Some(code) = m.script.lock().unwrap().pop_front().filter(|c| *c != 200) {
        return (StatusCode::from_u16(code).unwrap(), "scripted").into_response();
    }
    let text = (m.answer)(body["messages"][0]["content"].as_str().unwrap_or(""));
    Json(json!({"choices": [{"message": {"role": "assistant", "content": text}}]})).into_response()
}

async fn serve(script: &[u16], answer: Box<dyn Fn(&str) -> String + Send + Sync>) -> (Endpoint, Arc<Mock>) {
    let mock = Arc::new(Mock { script: Mutex::new(script.iter().copied().collect()), answer, hits: AtomicUsize::new(0) });
    let app = Router::new().route("/v1/chat/completions", post(chat)).with_state(mock.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let mut cfg = EndpointConfig::new(format!("http://{addr}/v1"), "mock");
    cfg.backoff_ms = 2;
    cfg.max_retries = 3;
    (Endpoint::new(cfg).unwrap(), mock)
}

fn truth_of(prompt: &str) -> (usize, usize) {
    let mut it = prompt.split_whitespace().map(|w| w.parse::<usize>().unwrap());
    (it.next().unwrap(), it.next().unwrap())
}

async fn probe_client_async() -> Outcome {
    let k = 6;
    let n = 10;
    let plant = move |c: usize, j: usize| (c * 5 + j * j) % (k + 1);
    let (ep, _) = serve(
        &[],
        Box::new(move |p| {
            let (c, j) = truth_of(p);
            match plant(c, j) {
                a if a == k => "cannot tell".into(),
                a => format!("Potential Product [{}]", a + 1),
            }
        }),
    )
    .await;
    let items: Vec<ProbeItem> =
        (1..=k).flat_map(|c| (0..n).map(move |j| ProbeItem { truth_slot: c, prompt: format!("{c} {j}") })).collect();
    let r = run_probe(&ep, &items, &ProbeOptions::new(k)).await.map_err(|e| e.to_string())?;
    let mut planted = vec![vec![0u64; k + 1]; k];
    for c in 1..=k {
        for j in 0..n {
            planted[c - 1][plant(c, j)] += 1;
        }
    }
    if r.counts != planted {
        return Err(format!("matrix {:?} != planted {planted:?}", r.counts));
    }

    let (ep, _) = serve(&[], Box::new(|_| "[1]".into())).await;
    let r = run_probe(&ep, &items, &ProbeOptions::new(k)).await.map_err(|e| e.to_string())?;
    let constant = fl(&r);
    if (constant - 244.95).abs() > 0.01 {
        return Err(format!("constant-[1] fluctuation {constant}"));
    }

    let (ep, mock) = serve(&[429, 429, 200], Box::new(|_| "[2]".into())).await;
    let c = ep.chat_complete("x").await.map_err(|e| e.to_string())?;
    if c.attempts != 3 || mock.hits.load(Ordering::SeqCst) != 3 {
        return Err(format!("429,429,200 took {} attempts", c.attempts));
    }
    let (ep, mock) = serve(&[500; 6], Box::new(|_| "[2]".into())).await;
    match ep.chat_complete("x").await {
        Err(ProbeError::Exhausted { attempts: 4, last: 500 }) if mock.hits.load(Ordering::SeqCst) == 4 => {}
        other => return Err(format!("500x6 with 3 retries gave {other:?}")),
    }
    let (ep, mock) = serve(&[404], Box::new(|_| "[2]".into())).await;
    match ep.chat_complete("x").await {
        Err(ProbeError::Status { status: 404, .. }) if mock.hits.load(Ordering::SeqCst) == 1 => {}
        other => return Err(format!("404 gave {other:?}")),
    }
    Ok(format!("planted {k}x{} matrix exact, constant-[1] K=6 fluctuation {constant:.2}%, retry scripts as expected", k + 1))
}

fn probe_client() -> Outcome {
    tokio::runtime::Runtime::new().map_err(|e| e.to_string())?.block_on(probe_client_async())
}

fn determinism(scratch: &Path) -> Outcome {
    let cfg = configs_dir().join("determinism.toml");
    let c = cfg.to_str().unwrap();
    let dirs = [scratch.join("a"), scratch.join("b")];
    for d in &dirs {
        let o = d.to_str().unwrap();
        for stage in ["gen-data", "pretrain", "eval"] {
            cli(&[stage, "-c", c, "--out-dir", o])?;
        }
    }
    let files = ["data/pretrain.jsonl", "data/finetune.jsonl", "base.pblb", "reports/base_matrix.csv", "reports/base_summary.csv"];
    let mut differing = Vec::new();
    for f in files {
        let read = |d: &Path| fs::read(d.join("determinism").join(f)).map_err(|e| format!("{f}: {e}"));
        if read(&dirs[0])? != read(&dirs[1])? {
            differing.push(f);
        }
    }
    check(differing.is_empty(), if differing.is_empty() { format!("{} artifacts byte-identical across two runs", files.len()) } else { format!("differ: {differing:?}") })
}

fn report(n: usize, name: &str, secs: f64, o: &Outcome) -> bool {
    let (tag, detail) = match o {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n} {name}: {tag} ({detail}) [{secs:.1}s]");
    o.is_ok()
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temp dir");
    let mut all = true;
    let timed = |f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        (o, t.elapsed().as_secs_f64())
    };

    let (o, s) = timed(&mut metric_fidelity);
    all &= report(1, "metric fidelity", s, &o);
    let (o, s) = timed(&mut parameter_counts);
    all &= report(2, "parameter counts", s, &o);
    let (o, s) = timed(&mut gradients);
    all &= report(3, "gradient correctness", s, &o);

    let t = Instant::now();
    let toy = toy_pipeline(&scratch.path().join("toy"));
    let secs = t.elapsed().as_secs_f64();
    match &toy {
        Ok(toy) => {
            all &= report(4, "bias induction", secs, &bias_induction(toy));
            all &= report(5, "mitigation", secs, &mitigation(toy));
            all &= report(6, "frozen base", 0.0, &frozen_base(toy));
        }
        Err(e) => {
            for (n, name) in [(4, "bias induction"), (5, "mitigation"), (6, "frozen base")] {
                all &= report(n, name, secs, &Err(e.clone()));
            }
        }
    }

    let (o, s) = timed(&mut permutation_coverage);
    all &= report(7, "permutation coverage", s, &o);
    let (o, s) = timed(&mut probe_client);
    all &= report(8, "probe client", s, &o);
    let (o, s) = timed(&mut || determinism(&scratch.path().join("det")));
    all &= report(9, "determinism", s, &o);

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
