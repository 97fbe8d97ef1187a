use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use tcprune_core::accounting::{emit_report, evaluate_accuracy, read_report_csv, PruneReport, ReportFormats};
use tcprune_core::criterion::write_score_dump;
use tcprune_core::data::{save_domain_pair, DomainPair};
use tcprune_core::driver::{self, prepare_data, BaseModel, Method, PreparedData};
use tcprune_core::zoo::init_params;
use tcprune_core::{Error, Result};

use crate::config::{sha256_hex, DataSource, RunConfig};
use crate::manifest::{RunManifest, SavedModel};

pub const BASE_FILE: &str = "base.json";
pub const EVAL_FILE: &str = "eval.json";
pub const MERGED_FILE: &str = "compare.csv";
pub const COMPARE_SUMMARY_FILE: &str = "compare_summary.csv";

/// Resolved data plus input digests.
pub struct Inputs {
    pub source: DataSource,
    pub pair: DomainPair,
    pub hashes: BTreeMap<String, String>,
}

impl Inputs {
    pub fn resolve(cfg: &mut RunConfig) -> Result<Self> {
        let source = DataSource::resolve(&cfg.data, cfg.prune.seed)?;
        cfg.data = source.canonical();
        let pair = source.load()?;
        let hashes = source.hashes(&pair)?;
        Ok(Self { source, pair, hashes })
    }
}

fn file_hashes(prefix: &str, dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        if e.file_type()?.is_file() {
            out.insert(
                format!("{prefix}/{}", e.file_name().to_string_lossy()),
                sha256_hex(&fs::read(e.path())?),
            );
        }
    }
    Ok(out)
}

fn model_dir(dir: &Path) -> PathBuf {
    if dir.join("graph.json").is_file() {
        dir.to_path_buf()
    } else {
        dir.join("model")
    }
}

pub fn gen_data(cfg: &mut RunConfig, out: &Path) -> Result<()> {
    let inputs = Inputs::resolve(cfg)?;
    if matches!(inputs.source, DataSource::Dir(_)) {
        return Err(Error::config("gen-data needs a generator spec, not a directory"));
    }
    let mut m = RunManifest::new("gen-data", cfg)?;
    m.input_hashes = inputs.hashes.clone();
    for f in ["source.tcpt", "source.labels", "target.tcpt", "target.labels", "meta.json"] {
        m.outputs.insert(f.into(), f.into());
    }
    m.write(out)?;
    save_domain_pair(out, &inputs.pair)?;
    println!(
        "wrote {} source and {} target examples to {}",
        inputs.pair.source.len(),
        inputs.pair.target.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseSummary {
    pub validation_acc: f64,
    pub source_acc: f64,
}

/// Trains and saves a base model under `out`.
pub fn train_base(cfg: &RunConfig, inputs: &Inputs, data: &PreparedData, out: &Path) -> Result<BaseModel> {
    let mut m = RunManifest::new("train-base", cfg)?;
    m.input_hashes = inputs.hashes.clone();
    m.outputs.insert("model".into(), "model".into());
    m.outputs.insert("summary".into(), BASE_FILE.into());
    m.write(out)?;
    let graph = cfg.build_graph(&inputs.pair)?;
    let init = init_params::<f32>(&graph, cfg.prune.seed)?;
    let base = driver::train_base(&graph, &init, data, &cfg.prune)?;
    SavedModel {
        graph: graph.clone(),
        params: base.params.clone(),
        normalization: data.normalization.clone(),
    }
    .save(&out.join("model"))?;
    let summary = BaseSummary {
        validation_acc: base.validation_acc,
        source_acc: evaluate_accuracy(&graph, &base.params, &data.source.images, &data.source.labels)?,
    };
    fs::write(out.join(BASE_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(base)
}

pub fn train_base_cmd(cfg: &mut RunConfig, out: &Path) -> Result<()> {
    let inputs = Inputs::resolve(cfg)?;
    cfg.validate()?;
    let data = prepare_data(&inputs.pair, &cfg.prune)?;
    let base = train_base(cfg, &inputs, &data, out)?;
    println!("base model: validation accuracy {:.4}", base.validation_acc);
    Ok(())
}

/// Prunes from `base_dir` (or a freshly trained base under `out/base`) and
/// writes report, model and optional score dump under `out`.
pub fn prune(
    cfg: &RunConfig,
    inputs: &Inputs,
    data: &PreparedData,
    base_dir: Option<&Path>,
    out: &Path,
    expect: Option<&RunManifest>,
) -> Result<PruneReport> {
    let mut m = RunManifest::new("prune", cfg)?;
    m.input_hashes = inputs.hashes.clone();
    if let Some(b) = base_dir {
        m.base = Some(b.display().to_string());
        m.input_hashes.extend(file_hashes("base", &model_dir(b))?);
    }
    if let Some(e) = expect {
        e.check_inputs(&m.input_hashes)?;
    }
    for (k, v) in [
        ("report", "report.csv"),
        ("summary", "summary.json"),
        ("plot", "plot.csv"),
        ("model", "model"),
    ] {
        m.outputs.insert(k.into(), v.into());
    }
    if cfg.score_dump {
        m.outputs.insert("scores".into(), "scores.csv".into());
    }
    m.write(out)?;

    let (graph, base) = match base_dir {
        Some(b) => {
            let saved = SavedModel::load(b)?;
            if saved.normalization != data.normalization {
                return Err(Error::Data(format!(
                    "base model {} was trained on different source data",
                    b.display()
                )));
            }
            let validation_acc = data.validation_accuracy(&saved.graph, &saved.params)?;
            (
                saved.graph,
                BaseModel {
                    params: saved.params,
                    validation_acc,
                },
            )
        }
        None => {
            let base = train_base(cfg, inputs, data, &out.join("base"))?;
            (cfg.build_graph(&inputs.pair)?, base)
        }
    };
    let result = driver::run(&graph, &base, data, &cfg.prune, cfg.score_dump)?;
    let mut report = result.report;
    report.config_hash = m.config_hash.clone();
    emit_report(&report, out, ReportFormats::all())?;
    SavedModel {
        graph: result.graph,
        params: result.params,
        normalization: data.normalization.clone(),
    }
    .save(&out.join("model"))?;
    if cfg.score_dump {
        let f = fs::File::create(out.join("scores.csv"))?;
        write_score_dump(f, &result.score_dump, true)?;
    }
    Ok(report)
}

pub fn prune_cmd(cfg: &mut RunConfig, base: Option<&Path>, out: &Path, expect: Option<&RunManifest>) -> Result<()> {
    let inputs = Inputs::resolve(cfg)?;
    cfg.validate()?;
    let data = prepare_data(&inputs.pair, &cfg.prune)?;
    let report = prune(cfg, &inputs, &data, base, out, expect)?;
    println!(
        "{}: {} iterations, FLOPs↓ {:.4}, Param↓ {:.4}, validation accuracy {:.4}",
        report.method,
        report.rows.len(),
        report.final_flops_down(),
        report.final_params_down(),
        report.final_acc.unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub target_acc: f64,
    pub source_acc: f64,
    pub target_examples: usize,
    pub flops: u64,
    pub params: u64,
}

/// Accuracy of a saved model on the whole target domain (labels read here
/// and nowhere else outside the validation split).
pub fn evaluate(model: &SavedModel, pair: &DomainPair) -> Result<EvalResult> {
    let target = model.normalization.apply(pair.target.images());
    let labels = pair.target.audited_labels("eval")?;
    let source = model.normalization.apply(&pair.source.images);
    Ok(EvalResult {
        target_acc: evaluate_accuracy(&model.graph, &model.params, &target, labels)?,
        source_acc: evaluate_accuracy(&model.graph, &model.params, &source, &pair.source.labels)?,
        target_examples: pair.target.len(),
        flops: tcprune_core::accounting::count_flops(&model.graph)?,
        params: tcprune_core::accounting::count_params(&model.graph, &model.params)?,
    })
}

pub fn eval_cmd(cfg: &mut RunConfig, model: &Path, out: Option<&Path>) -> Result<()> {
    let inputs = Inputs::resolve(cfg)?;
    let saved = SavedModel::load(model)?;
    if let Some(o) = out {
        let mut m = RunManifest::new("eval", cfg)?;
        m.input_hashes = inputs.hashes.clone();
        m.input_hashes.extend(file_hashes("model", &model_dir(model))?);
        m.outputs.insert("eval".into(), EVAL_FILE.into());
        m.write(o)?;
    }
    let r = evaluate(&saved, &inputs.pair)?;
    let text = serde_json::to_string_pretty(&r)?;
    if let Some(o) = out {
        fs::write(o.join(EVAL_FILE), &text)?;
    }
    println!("{text}");
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SummaryView {
    method: String,
    seed: u64,
    final_acc: Option<f64>,
    flops_down: f64,
    params_down: f64,
}

/// One merged row per run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedRow {
    pub run: String,
    pub method: String,
    pub seed: u64,
    pub iterations: usize,
    pub flops_down: f64,
    pub params_down: f64,
    pub val_acc: Option<f64>,
    pub target_acc: Option<f64>,
}

pub fn merged_row(dir: &Path) -> Result<MergedRow> {
    let summary: SummaryView = serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)?;
    let rows = read_report_csv(fs::File::open(dir.join("report.csv"))?)?;
    let target_acc = match fs::read_to_string(dir.join(EVAL_FILE)) {
        Ok(s) => Some(serde_json::from_str::<EvalResult>(&s)?.target_acc),
        Err(_) => None,
    };
    Ok(MergedRow {
        run: dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        method: summary.method,
        seed: summary.seed,
        iterations: rows.len(),
        flops_down: summary.flops_down,
        params_down: summary.params_down,
        val_acc: summary.final_acc,
        target_acc,
    })
}

fn write_merged(path: &Path, rows: &[MergedRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn report_cmd(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::Usage("report needs at least one run directory".into()));
    }
    let rows = runs.iter().map(|d| merged_row(d)).collect::<Result<Vec<_>>>()?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{:<24} {:<10} {:>5} {:>6} {:>9} {:>9} {:>8} {:>8}",
        "run", "method", "seed", "iters", "flops_dn", "param_dn", "val", "target"
    );
    for r in &rows {
        println!(
            "{:<24} {:<10} {:>5} {:>6} {:>9.4} {:>9.4} {:>8} {:>8}",
            r.run,
            r.method,
            r.seed,
            r.iterations,
            r.flops_down,
            r.params_down,
            fmt(r.val_acc),
            fmt(r.target_acc)
        );
    }
    if let Some(o) = out {
        write_merged(o, &rows)?;
    }
    Ok(())
}

/// Per-method means of a comparison, plus the unpruned base models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub method: String,
    pub runs: usize,
    pub mean_target_acc: f64,
    pub mean_flops_down: f64,
}

pub fn read_compare_summary(dir: &Path) -> Result<Vec<CompareSummary>> {
    let mut r = csv::Reader::from_path(dir.join(COMPARE_SUMMARY_FILE))?;
    r.deserialize().map(|x| Ok(x?)).collect()
}

pub fn thread_count() -> Result<usize> {
    match std::env::var("TCPRUNE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config(format!("TCPRUNE_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

/// Runs `jobs` on up to `threads` workers; results keep job order.
fn fan_out<J: Sync, R: Send>(jobs: &[J], threads: usize, f: impl Fn(&J) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(jobs.len()).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

pub fn run_dir_name(method: Method, seed: u64) -> String {
    format!("{method}-seed{seed}")
}

/// All four methods for every seed; one shared base model per seed.
pub fn compare_cmd(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<CompareSummary>> {
    if seeds.is_empty() {
        return Err(Error::Usage("compare needs at least one seed".into()));
    }
    cfg.validate()?;
    let threads = thread_count()?;
    fs::create_dir_all(out)?;
    let mut m = RunManifest::new("compare", cfg)?;
    m.outputs.insert("merged".into(), MERGED_FILE.into());
    m.outputs.insert("summary".into(), COMPARE_SUMMARY_FILE.into());
    for &s in seeds {
        m.outputs.insert(format!("base-seed{s}"), format!("bases/seed{s}"));
        for method in Method::ALL {
            let d = run_dir_name(method, s);
            m.outputs.insert(d.clone(), d);
        }
    }
    m.write(out)?;

    struct SeedCtx {
        seed: u64,
        cfg: RunConfig,
        inputs: Inputs,
        data: PreparedData,
        base_dir: PathBuf,
        base_target: f64,
    }
    let ctx: Vec<SeedCtx> = fan_out(seeds, threads, |&seed| {
        let mut c = cfg.clone();
        c.prune.seed = seed;
        let inputs = Inputs::resolve(&mut c)?;
        let data = prepare_data(&inputs.pair, &c.prune)?;
        let base_dir = out.join("bases").join(format!("seed{seed}"));
        train_base(&c, &inputs, &data, &base_dir)?;
        let base_target = evaluate(&SavedModel::load(&base_dir)?, &inputs.pair)?.target_acc;
        log::info!("seed {seed}: base target accuracy {base_target:.4}");
        Ok(SeedCtx {
            seed,
            cfg: c,
            inputs,
            data,
            base_dir,
            base_target,
        })
    })?;

    let jobs: Vec<(usize, Method)> = (0..ctx.len())
        .flat_map(|i| Method::ALL.into_iter().map(move |m| (i, m)))
        .collect();
    let rows = fan_out(&jobs, threads, |&(i, method)| {
        let s = &ctx[i];
        let mut c = s.cfg.clone();
        c.prune.method = method;
        let dir = out.join(run_dir_name(method, s.seed));
        prune(&c, &s.inputs, &s.data, Some(&s.base_dir), &dir, None)?;
        let r = evaluate(&SavedModel::load(&dir)?, &s.inputs.pair)?;
        fs::write(dir.join(EVAL_FILE), serde_json::to_string_pretty(&r)?)?;
        log::info!("{method} seed {}: target accuracy {:.4}", s.seed, r.target_acc);
        merged_row(&dir)
    })?;
    write_merged(&out.join(MERGED_FILE), &rows)?;

    let mut summary = vec![CompareSummary {
        method: "base".into(),
        runs: ctx.len(),
        mean_target_acc: ctx.iter().map(|s| s.base_target).sum::<f64>() / ctx.len() as f64,
        mean_flops_down: 0.0,
    }];
    for method in Method::ALL {
        let mine: Vec<&MergedRow> = rows.iter().filter(|r| r.method == method.as_str()).collect();
        let n = mine.len() as f64;
        summary.push(CompareSummary {
            method: method.to_string(),
            runs: mine.len(),
            mean_target_acc: mine.iter().map(|r| r.target_acc.unwrap_or(f64::NAN)).sum::<f64>() / n,
            mean_flops_down: mine.iter().map(|r| r.flops_down).sum::<f64>() / n,
        });
    }
    let mut w = csv::Writer::from_path(out.join(COMPARE_SUMMARY_FILE))?;
    for s in &summary {
        w.serialize(s)?;
        println!(
            "{:<10} runs {} mean target accuracy {:.4} mean FLOPs↓ {:.4}",
            s.method, s.runs, s.mean_target_acc, s.mean_flops_down
        );
    }
    w.flush()?;
    Ok(summary)
}
