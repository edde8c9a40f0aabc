//! Commands behind the binary: the artifact layout under the output
//! directory, a manifest for every file written, and the experiment
//! engine shared by eval, sweep-skills, and repro-suite.
//!
//! Every command reads and writes through a fixed relative layout so a
//! run directory is portable and auditable:
//!
//! ```text
//! out/
//!   data/            pretrain.txt, skills/*.jsonl, tasks/*.jsonl + *.spec.json
//!   checkpoints/     base.samk, skills/*.samk, routers/*.samk, fused/*.samk
//!   logs/            one CSV per training phase
//!   reports/         one evaluation report JSON per model/task pairing
//!   manifests/       one JSON per command invocation
//!   summary.csv      long-form metric rows from repro-suite
//!   summary.json     run provenance and criterion outcomes
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use samdkif_core::adalora::{log_csv, train_skill, SkillAdapter};
use samdkif_core::checkpoint;
use samdkif_core::cmaes::{adapt_fewshot, cma_log_csv};
use samdkif_core::data::{
    read_jsonl, split, write_jsonl, AdaptationSplit, InstructionExample, Setting, TaskSpec,
};
use samdkif_core::error::{Error, Result};
use samdkif_core::fusion::{evaluate, fuse, metric_name, EvalReport};
use samdkif_core::model::TransformerWeights;
use samdkif_core::pretrain::{pretrain_base, pretrain_log_csv};
use samdkif_core::router::{adapt_log_csv, adapt_normal, gate, RouterParams, SkillLibrary};
use samdkif_core::scalar::Scalar;
use samdkif_core::synth::{
    gen_downstream_task, gen_pretrain_corpus, gen_skill_corpus, SkillKind, TaskKind,
};
use samdkif_core::tape::backward_count;

use crate::config::{DtypeChoice, RunConfig};

/// Downstream tasks the suite covers, in report order.
pub const TASKS: [TaskKind; 3] = [
    TaskKind::SeenMix,
    TaskKind::UnseenComposite,
    TaskKind::BinaryOutcome,
];

// ---------------------------------------------------------------------------
// Artifact layout
// ---------------------------------------------------------------------------

pub const REL_PRETRAIN_TEXT: &str = "data/pretrain.txt";
pub const REL_BASE_CKPT: &str = "checkpoints/base.samk";
pub const REL_SUMMARY_CSV: &str = "summary.csv";
pub const REL_SUMMARY_JSON: &str = "summary.json";

pub fn rel_skill_data(name: &str) -> String {
    format!("data/skills/{name}.jsonl")
}

pub fn rel_task_data(task: &str) -> String {
    format!("data/tasks/{task}.jsonl")
}

pub fn rel_task_spec(task: &str) -> String {
    format!("data/tasks/{task}.spec.json")
}

pub fn rel_skill_ckpt(name: &str) -> String {
    format!("checkpoints/skills/{name}.samk")
}

pub fn rel_router_ckpt(task: &str, method: &str, k: usize, sample: usize) -> String {
    format!("checkpoints/routers/{task}-{method}-k{k}-s{sample}.samk")
}

pub fn rel_fused_ckpt(stem: &str) -> String {
    format!("checkpoints/fused/{stem}.samk")
}

pub fn rel_report(task: &str, method: &str, setting: Setting, k: usize, sample: usize) -> String {
    format!(
        "reports/{task}-{method}-{}-k{k}-s{sample}.json",
        setting_name(setting)
    )
}

pub fn setting_name(setting: Setting) -> &'static str {
    match setting {
        Setting::Normal => "normal",
        Setting::FewShot => "fewshot",
    }
}

fn abs(cfg: &RunConfig, rel: &str) -> PathBuf {
    cfg.run.out_dir.join(rel)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{} not found; {hint}",
            path.display()
        )))
    }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

/// Size and digest of one artifact, relative to the output directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileStamp {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Record of one command invocation: what it read, what it wrote, and
/// under which configuration. Every artifact in the output directory
/// must appear as an output of exactly one manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub qualifier: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: Vec<FileStamp>,
    pub outputs: Vec<FileStamp>,
    pub wall_clock_secs: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

pub fn stamp(cfg: &RunConfig, rel: &str) -> Result<FileStamp> {
    let bytes = fs::read(abs(cfg, rel))?;
    Ok(FileStamp {
        path: rel.to_string(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    })
}

fn stamp_all(cfg: &RunConfig, rels: &[String]) -> Result<Vec<FileStamp>> {
    rels.iter().map(|r| stamp(cfg, r)).collect()
}

fn write_manifest(cfg: &RunConfig, manifest: &Manifest) -> Result<String> {
    let rel = if manifest.qualifier.is_empty() {
        format!("manifests/{}.json", manifest.command)
    } else {
        format!("manifests/{}-{}.json", manifest.command, manifest.qualifier)
    };
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    write_text(&abs(cfg, &rel), &text)?;
    Ok(rel)
}

struct ManifestBuilder {
    command: String,
    qualifier: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started: Instant,
}

impl ManifestBuilder {
    fn new(command: &str, qualifier: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            qualifier: qualifier.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    fn input(&mut self, rel: impl Into<String>) {
        self.inputs.push(rel.into());
    }

    fn output(&mut self, rel: impl Into<String>) {
        self.outputs.push(rel.into());
    }

    fn finish(self, cfg: &RunConfig) -> Result<String> {
        let manifest = Manifest {
            command: self.command,
            qualifier: self.qualifier,
            seed: cfg.run.seed,
            config_sha256: cfg.sha256(),
            inputs: stamp_all(cfg, &self.inputs)?,
            outputs: stamp_all(cfg, &self.outputs)?,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        write_manifest(cfg, &manifest)
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

/// Generate the pretraining text, one corpus per configured skill, and
/// the downstream task datasets with their specs.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let mut mf = ManifestBuilder::new("gen-data", "");

    let lines = gen_pretrain_corpus(cfg.data.pretrain_lines, cfg.derived_seed("data:pretrain"));
    let mut text = lines.join("\n");
    text.push('\n');
    write_text(&abs(cfg, REL_PRETRAIN_TEXT), &text)?;
    mf.output(REL_PRETRAIN_TEXT);
    println!("gen-data: {} pretrain lines", lines.len());

    for kind in cfg.skill_kinds() {
        let seed = cfg.derived_seed(&format!("data:skill:{}", kind.name()));
        let examples = gen_skill_corpus(kind, cfg.data.examples_per_skill, seed)?;
        let rel = rel_skill_data(kind.name());
        write_jsonl(&abs(cfg, &rel), &examples)?;
        mf.output(rel);
        println!("gen-data: skill {} ({} examples)", kind.name(), examples.len());
    }

    for task in TASKS {
        let seed = cfg.derived_seed(&format!("data:task:{}", task.name()));
        let (examples, spec) = gen_downstream_task(task, cfg.data.task_n, seed)?;
        let rel = rel_task_data(task.name());
        write_jsonl(&abs(cfg, &rel), &examples)?;
        mf.output(rel);
        let spec_rel = rel_task_spec(task.name());
        let mut spec_text = serde_json::to_string_pretty(&spec)?;
        spec_text.push('\n');
        write_text(&abs(cfg, &spec_rel), &spec_text)?;
        mf.output(spec_rel);
        println!("gen-data: task {} ({} examples)", task.name(), examples.len());
    }

    let rel = mf.finish(cfg)?;
    println!("gen-data: manifest {rel}");
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    match cfg.run.dtype {
        DtypeChoice::F32 => pretrain_impl::<f32>(cfg),
        DtypeChoice::F64 => pretrain_impl::<f64>(cfg),
    }
}

fn pretrain_impl<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let mut mf = ManifestBuilder::new("pretrain", "");
    let corpus_path = abs(cfg, REL_PRETRAIN_TEXT);
    require(&corpus_path, "run gen-data first")?;
    mf.input(REL_PRETRAIN_TEXT);

    let corpus: Vec<String> = fs::read_to_string(&corpus_path)?
        .lines()
        .map(str::to_string)
        .collect();
    let mut train_cfg = cfg.pretrain.clone();
    train_cfg.seed = cfg.derived_seed("pretrain");

    let (weights, log): (TransformerWeights<T>, _) =
        pretrain_base(cfg.model.clone(), &corpus, &train_cfg)?;
    checkpoint::save_base(abs(cfg, REL_BASE_CKPT), &weights)?;
    mf.output(REL_BASE_CKPT);
    write_text(&abs(cfg, "logs/pretrain.csv"), &pretrain_log_csv(&log))?;
    mf.output("logs/pretrain.csv");

    let last = log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "pretrain: {} steps, final loss {last:.4}, base {} ({} params)",
        log.len(),
        weights.fingerprint(),
        weights.param_count()
    );
    let rel = mf.finish(cfg)?;
    println!("pretrain: manifest {rel}");
    Ok(())
}

// ---------------------------------------------------------------------------
// train-skill
// ---------------------------------------------------------------------------

pub fn cmd_train_skill(cfg: &RunConfig, only: Option<&str>, parallel: bool) -> Result<()> {
    match cfg.run.dtype {
        DtypeChoice::F32 => train_skill_impl::<f32>(cfg, only, parallel),
        DtypeChoice::F64 => train_skill_impl::<f64>(cfg, only, parallel),
    }
}

fn train_skill_impl<T: Scalar + Send + Sync>(
    cfg: &RunConfig,
    only: Option<&str>,
    parallel: bool,
) -> Result<()> {
    let kinds = cfg.skill_kinds();
    let kinds: Vec<SkillKind> = match only {
        Some(name) => {
            let kind = SkillKind::from_name(name)?;
            if !kinds.contains(&kind) {
                return Err(Error::Contract(format!(
                    "skill '{name}' is not in the configured skill list"
                )));
            }
            vec![kind]
        }
        None => kinds,
    };

    let base: TransformerWeights<T> = checkpoint::load_base(abs(cfg, REL_BASE_CKPT))?;

    let mut jobs = Vec::new();
    for kind in &kinds {
        let data_rel = rel_skill_data(kind.name());
        require(&abs(cfg, &data_rel), "run gen-data first")?;
        let examples = read_jsonl(&abs(cfg, &data_rel))?;
        let mut train_cfg = cfg.skill_train.clone();
        train_cfg.seed = cfg.derived_seed(&format!("skill:{}", kind.name()));
        jobs.push((*kind, data_rel, examples, train_cfg));
    }

    type Trained<T> = (SkillAdapter<T>, String);
    let run_one = |job: &(SkillKind, String, Vec<InstructionExample>, _)| -> Result<Trained<T>> {
        let (kind, _, examples, train_cfg) = job;
        let (outcome, log) = train_skill(&base, kind.name(), examples, train_cfg)?;
        let adapter = outcome.into_adapter()?;
        Ok((adapter, log_csv(&log)))
    };

    let results: Vec<Result<Trained<T>>> = if parallel && jobs.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs.iter().map(|job| scope.spawn(|| run_one(job))).collect();
            handles.into_iter().map(|h| h.join().expect("skill trainer panicked")).collect()
        })
    } else {
        jobs.iter().map(run_one).collect()
    };

    let mut mf = ManifestBuilder::new(
        "train-skill",
        &only.map(str::to_string).unwrap_or_default(),
    );
    mf.input(REL_BASE_CKPT);
    for ((kind, data_rel, _, _), result) in jobs.iter().zip(results) {
        let (adapter, log) = result?;
        mf.input(data_rel.clone());
        let ckpt_rel = rel_skill_ckpt(kind.name());
        checkpoint::save_adapter(abs(cfg, &ckpt_rel), &adapter)?;
        mf.output(ckpt_rel);
        let log_rel = format!("logs/skill-{}.csv", kind.name());
        write_text(&abs(cfg, &log_rel), &log)?;
        mf.output(log_rel);
        let alive: usize = adapter.triplets.iter().map(|t| t.alive_count()).sum();
        println!(
            "train-skill: {} done ({} params, {alive} alive components)",
            kind.name(),
            adapter.param_count(),
        );
    }
    let rel = mf.finish(cfg)?;
    println!("train-skill: manifest {rel}");
    Ok(())
}

// ---------------------------------------------------------------------------
// Experiment engine
// ---------------------------------------------------------------------------

/// Model-selection strategies compared by the suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Frozen pretrained weights, no skills.
    Base,
    /// All K skills fused at equal weight, no routing.
    Uniform,
    /// Router trained by gradient descent on the adaptation set.
    Normal,
    /// Router adapted by the evolution strategy on 32 examples.
    FewShot,
    /// One skill's delta applied alone.
    Single(usize),
}

impl Method {
    pub fn name(self) -> String {
        match self {
            Method::Base => "base".into(),
            Method::Uniform => "uniform_router".into(),
            Method::Normal => "adapted_normal".into(),
            Method::FewShot => "adapted_fewshot".into(),
            Method::Single(i) => format!("single_skill_{i}"),
        }
    }
}

/// One metric observation in the long-form summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub task: String,
    pub method: String,
    pub setting: String,
    pub k: usize,
    pub sample: usize,
    pub metric: String,
    pub value: f64,
}

pub fn rows_to_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("task,method,setting,k,sample,metric,value\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.task, r.method, r.setting, r.k, r.sample, r.metric, r.value
        ));
    }
    out
}

fn sort_rows(rows: &mut [SummaryRow]) {
    rows.sort_by(|a, b| {
        (&a.task, &a.method, &a.setting, a.k, a.sample, &a.metric).cmp(&(
            &b.task, &b.method, &b.setting, b.k, b.sample, &b.metric,
        ))
    });
}

/// Base weights plus the trained skill library, loaded once and shared
/// by every run in a suite.
pub struct Engine<'a, T: Scalar> {
    cfg: &'a RunConfig,
    pub base: TransformerWeights<T>,
    pub adapters: Vec<SkillAdapter<T>>,
}

/// Everything one evaluation run produced.
pub struct RunOutput {
    pub rows: Vec<SummaryRow>,
    pub report_rel: String,
    pub headline: f64,
}

impl<'a, T: Scalar> Engine<'a, T> {
    pub fn load(cfg: &'a RunConfig) -> Result<Self> {
        let base = checkpoint::load_base(abs(cfg, REL_BASE_CKPT))?;
        let mut adapters = Vec::new();
        for kind in cfg.skill_kinds() {
            adapters.push(checkpoint::load_adapter(abs(cfg, &rel_skill_ckpt(kind.name())))?);
        }
        Ok(Engine { cfg, base, adapters })
    }

    pub fn k_full(&self) -> usize {
        self.adapters.len()
    }

    /// Library over the first `k` configured skills.
    pub fn library(&self, k: usize) -> Result<SkillLibrary<T>> {
        if k == 0 || k > self.adapters.len() {
            return Err(Error::Contract(format!(
                "skill budget k={k} outside 1..={}",
                self.adapters.len()
            )));
        }
        SkillLibrary::new(self.adapters[..k].to_vec())
    }

    pub fn load_task(&self, task: &str) -> Result<(Vec<InstructionExample>, TaskSpec)> {
        let data_path = abs(self.cfg, &rel_task_data(task));
        require(&data_path, "run gen-data first")?;
        let examples = read_jsonl(&data_path)?;
        let spec_text = fs::read_to_string(abs(self.cfg, &rel_task_spec(task)))?;
        let spec: TaskSpec = serde_json::from_str(&spec_text)
            .map_err(|e| Error::Contract(format!("bad task spec for {task}: {e}")))?;
        Ok((examples, spec))
    }

    /// Deterministic split shared by every method on a task, so scores
    /// differ only through training randomness.
    pub fn task_split(&self, task: &str, setting: Setting) -> Result<(AdaptationSplit, TaskSpec)> {
        let (examples, mut spec) = self.load_task(task)?;
        spec.setting = setting;
        let seed = self
            .cfg
            .derived_seed(&format!("split:{task}:{}", setting_name(setting)));
        Ok((split(&examples, setting, seed)?, spec))
    }

    fn eval_subset(&self, test: &[InstructionExample]) -> Vec<InstructionExample> {
        test.iter().take(self.cfg.data.eval_n).cloned().collect()
    }

    /// Train (if the method needs it), fuse, evaluate, and report one
    /// (task, method, setting, k, sample) cell.
    pub fn run(
        &self,
        task: &str,
        method: Method,
        setting: Setting,
        k: usize,
        sample: usize,
    ) -> Result<RunOutput> {
        if method == Method::FewShot && setting != Setting::FewShot {
            return Err(Error::Contract(
                "few-shot adaptation runs on the few-shot split".into(),
            ));
        }
        let (task_split, spec) = self.task_split(task, setting)?;
        let adapt_label = format!(
            "adapt:{task}:{}:k{k}:s{sample}",
            method.name()
        );

        let weights = match method {
            Method::Base => self.base.clone(),
            Method::Uniform => {
                let lib = self.library(k)?;
                let r = vec![1.0 / k as f64; k];
                fuse(&self.base, &lib, &r, self.cfg.router.tau)?.weights
            }
            Method::Single(i) => {
                let lib = self.library(k)?;
                if i >= k {
                    return Err(Error::Contract(format!("single skill index {i} >= k={k}")));
                }
                let mut r = vec![0.0; k];
                r[i] = 1.0;
                fuse(&self.base, &lib, &r, self.cfg.router.tau)?.weights
            }
            Method::Normal => {
                let lib = self.library(k)?;
                let mut rcfg = self.cfg.router.clone();
                rcfg.seed = self.cfg.derived_seed(&adapt_label);
                let (params, _) = adapt_normal(&self.base, &lib, &task_split, &rcfg)?;
                let out = gate(&params, &lib)?;
                fuse(&self.base, &lib, &out.r, params.tau)?.weights
            }
            Method::FewShot => {
                let lib = self.library(k)?;
                let mut fcfg = self.cfg.fewshot.clone();
                fcfg.seed = self.cfg.derived_seed(&adapt_label);
                let before = backward_count();
                let (params, _) = adapt_fewshot(&self.base, &lib, &task_split, &fcfg)?;
                let grads = backward_count() - before;
                if grads != 0 {
                    return Err(Error::Contract(format!(
                        "few-shot adaptation took {grads} backward passes; it must take none"
                    )));
                }
                let out = gate(&params, &lib)?;
                fuse(&self.base, &lib, &out.r, params.tau)?.weights
            }
        };

        let test = self.eval_subset(&task_split.test);
        let eval_seed = self.cfg.derived_seed(&format!(
            "eval:{task}:{}:{}:k{k}:s{sample}",
            method.name(),
            setting_name(setting)
        ));
        let report = evaluate(&weights, &test, &spec, eval_seed)?;

        let row_k = if method == Method::Base { 0 } else { k };
        let rows: Vec<SummaryRow> = report
            .values
            .iter()
            .map(|(metric, value)| SummaryRow {
                task: task.to_string(),
                method: method.name(),
                setting: setting_name(setting).to_string(),
                k: row_k,
                sample,
                metric: metric.clone(),
                value: *value,
            })
            .collect();

        let report_rel = rel_report(task, &method.name(), setting, row_k, sample);
        write_text(&abs(self.cfg, &report_rel), &report.to_json())?;
        Ok(RunOutput {
            rows,
            report_rel,
            headline: report.headline(),
        })
    }
}

// ---------------------------------------------------------------------------
// adapt / fuse / eval
// ---------------------------------------------------------------------------

pub fn cmd_adapt(cfg: &RunConfig, task: &str, method: &str, k: Option<usize>, sample: usize) -> Result<()> {
    match cfg.run.dtype {
        DtypeChoice::F32 => adapt_impl::<f32>(cfg, task, method, k, sample),
        DtypeChoice::F64 => adapt_impl::<f64>(cfg, task, method, k, sample),
    }
}

fn adapt_impl<T: Scalar>(
    cfg: &RunConfig,
    task: &str,
    method: &str,
    k: Option<usize>,
    sample: usize,
) -> Result<()> {
    let engine = Engine::<T>::load(cfg)?;
    let k = k.unwrap_or(engine.k_full());
    let lib = engine.library(k)?;
    let mut mf = ManifestBuilder::new("adapt", &format!("{task}-{method}-k{k}-s{sample}"));
    mf.input(REL_BASE_CKPT);
    for kind in cfg.skill_kinds().iter().take(k) {
        mf.input(rel_skill_ckpt(kind.name()));
    }
    mf.input(rel_task_data(task));
    mf.input(rel_task_spec(task));

    let adapt_label = |name: &str| format!("adapt:{task}:{name}:k{k}:s{sample}");
    let (params, log_rel, log_text) = match method {
        "normal" => {
            let (task_split, _) = engine.task_split(task, Setting::Normal)?;
            let mut rcfg = cfg.router.clone();
            rcfg.seed = cfg.derived_seed(&adapt_label(&Method::Normal.name()));
            let (params, log) = adapt_normal(&engine.base, &lib, &task_split, &rcfg)?;
            let rel = format!("logs/adapt-{task}-normal-k{k}-s{sample}.csv");
            (params, rel, adapt_log_csv(&log))
        }
        "fewshot" => {
            let (task_split, _) = engine.task_split(task, Setting::FewShot)?;
            let mut fcfg = cfg.fewshot.clone();
            fcfg.seed = cfg.derived_seed(&adapt_label(&Method::FewShot.name()));
            let before = backward_count();
            let (params, result) = adapt_fewshot(&engine.base, &lib, &task_split, &fcfg)?;
            let grads = backward_count() - before;
            if grads != 0 {
                return Err(Error::Contract(format!(
                    "few-shot adaptation took {grads} backward passes; it must take none"
                )));
            }
            println!(
                "adapt: evolution used {} evaluations, best fitness {:.6}, no backward passes",
                result.evals, result.f_best
            );
            let rel = format!("logs/adapt-{task}-fewshot-k{k}-s{sample}.csv");
            (params, rel, cma_log_csv(&result.history))
        }
        other => {
            return Err(Error::Contract(format!(
                "unknown adapt method '{other}' (expected normal or fewshot)"
            )))
        }
    };

    let out = gate(&params, &lib)?;
    let ckpt_rel = rel_router_ckpt(task, method, k, sample);
    checkpoint::save_router(abs(cfg, &ckpt_rel), &params, lib.config(), &lib.skill_ids())?;
    write_text(&abs(cfg, &log_rel), &log_text)?;
    mf.output(ckpt_rel.clone());
    mf.output(log_rel);

    let mix: Vec<String> = out.r.iter().map(|v| format!("{v:.3}")).collect();
    println!(
        "adapt: {task}/{method} router saved to {ckpt_rel}; mixture [{}], argmax {}",
        mix.join(", "),
        lib.skill_ids()[out.argmax()]
    );
    let rel = mf.finish(cfg)?;
    println!("adapt: manifest {rel}");
    Ok(())
}

pub fn cmd_fuse(cfg: &RunConfig, router: &str) -> Result<()> {
    match cfg.run.dtype {
        DtypeChoice::F32 => fuse_impl::<f32>(cfg, router),
        DtypeChoice::F64 => fuse_impl::<f64>(cfg, router),
    }
}

fn fuse_impl<T: Scalar>(cfg: &RunConfig, router: &str) -> Result<()> {
    // Checkpoint arguments are relative to the output directory;
    // absolute paths pass through `join` unchanged.
    let router_rel = router.to_string();
    let router_path = abs(cfg, &router_rel);
    if !router_path.exists() {
        return Err(Error::MissingCheckpoint(router_path));
    }
    let (params, _, skill_ids): (RouterParams<T>, _, Vec<String>) =
        checkpoint::load_router(&router_path)?;

    let engine = Engine::<T>::load(cfg)?;
    let configured = engine
        .cfg
        .skill_kinds()
        .iter()
        .map(|k| k.name().to_string())
        .collect::<Vec<_>>();
    if skill_ids.len() > configured.len() || configured[..skill_ids.len()] != skill_ids[..] {
        return Err(Error::Contract(format!(
            "router skill list [{}] is not a prefix of the configured skills",
            skill_ids.join(", ")
        )));
    }
    let lib = engine.library(skill_ids.len())?;
    let out = gate(&params, &lib)?;
    let fused = fuse(&engine.base, &lib, &out.r, params.tau)?;

    let stem = Path::new(&router_rel)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("router")
        .to_string();
    let fused_rel = rel_fused_ckpt(&stem);
    checkpoint::save_fused(abs(cfg, &fused_rel), &fused)?;

    let mut mf = ManifestBuilder::new("fuse", &stem);
    mf.input(REL_BASE_CKPT);
    for id in &skill_ids {
        mf.input(rel_skill_ckpt(id));
    }
    mf.input(router_rel.clone());
    mf.output(fused_rel.clone());

    let mix: Vec<String> = fused.provenance.mixture.iter().map(|v| format!("{v:.3}")).collect();
    println!(
        "fuse: {fused_rel} from base {} with mixture [{}]",
        fused.provenance.base_id,
        mix.join(", ")
    );
    let rel = mf.finish(cfg)?;
    println!("fuse: manifest {rel}");
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: &str, task: &str, setting: &str) -> Result<()> {
    let setting = match setting {
        "normal" => Setting::Normal,
        "fewshot" => Setting::FewShot,
        other => {
            return Err(Error::Contract(format!(
                "unknown setting '{other}' (expected normal or fewshot)"
            )))
        }
    };
    let ckpt_rel = ckpt.to_string();
    let ckpt_path = abs(cfg, &ckpt_rel);
    if !ckpt_path.exists() {
        return Err(Error::MissingCheckpoint(ckpt_path));
    }
    let (kind, _, _) = checkpoint::peek(&ckpt_path)?;
    match cfg.run.dtype {
        DtypeChoice::F32 => eval_impl::<f32>(cfg, &ckpt_rel, kind, task, setting),
        DtypeChoice::F64 => eval_impl::<f64>(cfg, &ckpt_rel, kind, task, setting),
    }
}

fn eval_impl<T: Scalar>(
    cfg: &RunConfig,
    ckpt_rel: &str,
    kind: checkpoint::CheckpointKind,
    task: &str,
    setting: Setting,
) -> Result<()> {
    let ckpt_path = abs(cfg, ckpt_rel);
    let weights: TransformerWeights<T> = match kind {
        checkpoint::CheckpointKind::Base => checkpoint::load_base(&ckpt_path)?,
        checkpoint::CheckpointKind::Fused => checkpoint::load_fused(&ckpt_path)?.weights,
        other => {
            return Err(Error::Contract(format!(
                "eval needs a base or fused checkpoint, got {}",
                other.name()
            )))
        }
    };

    let data_path = abs(cfg, &rel_task_data(task));
    require(&data_path, "run gen-data first")?;
    let examples = read_jsonl(&data_path)?;
    let spec_text = fs::read_to_string(abs(cfg, &rel_task_spec(task)))?;
    let mut spec: TaskSpec = serde_json::from_str(&spec_text)
        .map_err(|e| Error::Contract(format!("bad task spec for {task}: {e}")))?;
    spec.setting = setting;
    let split_seed = cfg.derived_seed(&format!("split:{task}:{}", setting_name(setting)));
    let task_split = split(&examples, setting, split_seed)?;
    let test: Vec<InstructionExample> = task_split
        .test
        .iter()
        .take(cfg.data.eval_n)
        .cloned()
        .collect();

    let stem = Path::new(ckpt_rel)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string();
    let eval_seed = cfg.derived_seed(&format!("eval:{task}:{stem}"));
    let report: EvalReport = evaluate(&weights, &test, &spec, eval_seed)?;

    let report_rel = format!("reports/eval-{task}-{stem}.json");
    write_text(&abs(cfg, &report_rel), &report.to_json())?;

    let mut mf = ManifestBuilder::new("eval", &format!("{task}-{stem}"));
    mf.input(ckpt_rel.to_string());
    mf.input(rel_task_data(task));
    mf.input(rel_task_spec(task));
    mf.output(report_rel.clone());

    println!("{}", report.to_json());
    println!(
        "eval: {task} {} = {:.4} over {} examples ({report_rel})",
        metric_name(report.metric),
        report.headline(),
        report.n_examples
    );
    let rel = mf.finish(cfg)?;
    println!("eval: manifest {rel}");
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep-skills
// ---------------------------------------------------------------------------

pub fn cmd_sweep_skills(cfg: &RunConfig, ks: Option<Vec<usize>>) -> Result<()> {
    match cfg.run.dtype {
        DtypeChoice::F32 => sweep_impl::<f32>(cfg, ks),
        DtypeChoice::F64 => sweep_impl::<f64>(cfg, ks),
    }
}

fn sweep_impl<T: Scalar>(cfg: &RunConfig, ks: Option<Vec<usize>>) -> Result<()> {
    let ks = ks.unwrap_or_else(|| cfg.data.sweep_ks.clone());
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract(
            "sweep budgets must be non-empty and strictly increasing".into(),
        ));
    }
    let engine = Engine::<T>::load(cfg)?;
    if *ks.last().unwrap() > engine.k_full() {
        return Err(Error::Contract(format!(
            "sweep budget {} exceeds the {} trained skills",
            ks.last().unwrap(),
            engine.k_full()
        )));
    }

    let task = TaskKind::UnseenComposite.name();
    let mut mf = ManifestBuilder::new("sweep-skills", "");
    mf.input(REL_BASE_CKPT);
    for kind in cfg.skill_kinds() {
        mf.input(rel_skill_ckpt(kind.name()));
    }
    mf.input(rel_task_data(task));
    mf.input(rel_task_spec(task));

    let mut rows = Vec::new();
    for &k in &ks {
        let mut scores = Vec::new();
        for sample in 0..cfg.data.n_seeds {
            let out = engine.run(task, Method::Normal, Setting::Normal, k, sample)?;
            mf.output(out.report_rel.clone());
            scores.push(out.headline);
            rows.extend(out.rows);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        println!("sweep-skills: k={k} mean accuracy {mean:.4} over {} samples", scores.len());
    }

    sort_rows(&mut rows);
    write_text(&abs(cfg, "reports/sweep.csv"), &rows_to_csv(&rows))?;
    mf.output("reports/sweep.csv");
    let rel = mf.finish(cfg)?;
    println!("sweep-skills: manifest {rel}");
    Ok(())
}

// ---------------------------------------------------------------------------
// repro-suite
// ---------------------------------------------------------------------------

/// Outcome of one acceptance check the suite enforces on its own rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub id: String,
    pub passed: bool,
    pub details: String,
}

/// Provenance block written next to the summary table.
#[derive(Serialize)]
struct ExperimentSummary<'a> {
    config_sha256: String,
    seed: u64,
    n_samples: usize,
    tasks: Vec<&'a str>,
    skills: &'a [String],
    wall_clock_secs: f64,
    criteria: &'a [CriterionOutcome],
}

fn mean_over_samples(rows: &[SummaryRow], task: &str, method: &str, setting: &str, k: usize, metric: &str) -> Option<f64> {
    let picked: Vec<f64> = rows
        .iter()
        .filter(|r| {
            r.task == task
                && r.method == method
                && r.setting == setting
                && r.k == k
                && r.metric == metric
        })
        .map(|r| r.value)
        .collect();
    if picked.is_empty() {
        None
    } else {
        Some(picked.iter().sum::<f64>() / picked.len() as f64)
    }
}

/// End-to-end pipeline plus the experiment grid. Writes `summary.csv`
/// and `summary.json`, then fails if any built-in criterion is violated.
pub fn cmd_repro_suite(cfg: &RunConfig, parallel: bool) -> Result<()> {
    let started = Instant::now();
    cmd_gen_data(cfg)?;
    cmd_pretrain(cfg)?;
    cmd_train_skill(cfg, None, parallel)?;
    match cfg.run.dtype {
        DtypeChoice::F32 => repro_downstream::<f32>(cfg, started),
        DtypeChoice::F64 => repro_downstream::<f64>(cfg, started),
    }
}

/// The skill budget the routing criteria are pinned to.
const CRITERION_K: usize = 4;

fn repro_downstream<T: Scalar>(cfg: &RunConfig, started: Instant) -> Result<()> {
    let engine = Engine::<T>::load(cfg)?;
    let k_full = engine.k_full();
    if k_full < CRITERION_K || !cfg.data.sweep_ks.contains(&CRITERION_K) {
        return Err(Error::Contract(format!(
            "repro-suite needs at least {CRITERION_K} skills and a sweep point at k={CRITERION_K}"
        )));
    }
    let n = cfg.data.n_seeds;
    let composite = TaskKind::UnseenComposite.name();

    let mut mf = ManifestBuilder::new("repro-suite", "");
    mf.input(REL_BASE_CKPT);
    for kind in cfg.skill_kinds() {
        mf.input(rel_skill_ckpt(kind.name()));
    }
    for task in TASKS {
        mf.input(rel_task_data(task.name()));
        mf.input(rel_task_spec(task.name()));
    }

    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut run = |task: &str,
                   method: Method,
                   setting: Setting,
                   k: usize,
                   sample: usize,
                   mf: &mut ManifestBuilder|
     -> Result<()> {
        let out = engine.run(task, method, setting, k, sample)?;
        println!(
            "repro-suite: {task} {} {} k={k} s={sample} -> {:.4}",
            method.name(),
            setting_name(setting),
            out.headline
        );
        mf.output(out.report_rel.clone());
        rows.extend(out.rows);
        Ok(())
    };

    let nrm = Setting::Normal;
    for task in TASKS {
        let t = task.name();
        run(t, Method::Base, nrm, k_full, 0, &mut mf)?;
        run(t, Method::Uniform, nrm, k_full, 0, &mut mf)?;
        if t != composite {
            for s in 0..n {
                run(t, Method::Normal, nrm, k_full, s, &mut mf)?;
            }
        }
    }

    // The composite task carries the routing criteria: a sweep over
    // skill budgets, the uniform baseline at the pinned budget, the
    // few-shot track against the base on the same test set, and each
    // skill alone.
    if !cfg.data.sweep_ks.contains(&k_full) {
        for s in 0..n {
            run(composite, Method::Normal, nrm, k_full, s, &mut mf)?;
        }
    }
    for &k in &cfg.data.sweep_ks {
        for s in 0..n {
            run(composite, Method::Normal, nrm, k, s, &mut mf)?;
        }
    }
    if CRITERION_K != k_full {
        run(composite, Method::Uniform, nrm, CRITERION_K, 0, &mut mf)?;
    }
    for s in 0..n {
        run(composite, Method::FewShot, Setting::FewShot, CRITERION_K, s, &mut mf)?;
    }
    run(composite, Method::Base, Setting::FewShot, k_full, 0, &mut mf)?;
    for i in 0..k_full {
        run(composite, Method::Single(i), nrm, k_full, 0, &mut mf)?;
    }

    sort_rows(&mut rows);
    rows.dedup_by(|a, b| a == b);
    write_text(&abs(cfg, REL_SUMMARY_CSV), &rows_to_csv(&rows))?;
    mf.output(REL_SUMMARY_CSV);

    let criteria = check_criteria(cfg, &engine, &rows)?;
    let summary = ExperimentSummary {
        config_sha256: cfg.sha256(),
        seed: cfg.run.seed,
        n_samples: n,
        tasks: TASKS.iter().map(|t| t.name()).collect(),
        skills: &cfg.data.skills,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        criteria: &criteria,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    write_text(&abs(cfg, REL_SUMMARY_JSON), &text)?;
    mf.output(REL_SUMMARY_JSON);
    let rel = mf.finish(cfg)?;
    println!("repro-suite: manifest {rel}");

    let mut failed = Vec::new();
    for c in &criteria {
        let tag = if c.passed { "pass" } else { "FAIL" };
        println!("repro-suite: [{tag}] {}: {}", c.id, c.details);
        if !c.passed {
            failed.push(c.id.clone());
        }
    }
    if failed.is_empty() {
        println!("repro-suite: all criteria hold");
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "criteria violated: {}",
            failed.join(", ")
        )))
    }
}

fn check_criteria<T: Scalar>(
    cfg: &RunConfig,
    engine: &Engine<'_, T>,
    rows: &[SummaryRow],
) -> Result<Vec<CriterionOutcome>> {
    let composite = TaskKind::UnseenComposite.name();
    let acc = "accuracy";
    let need = |v: Option<f64>, what: &str| -> Result<f64> {
        v.ok_or_else(|| Error::Contract(format!("summary rows missing {what}")))
    };

    let adapted = need(
        mean_over_samples(rows, composite, "adapted_normal", "normal", CRITERION_K, acc),
        "adapted_normal at the criterion budget",
    )?;
    let uniform = need(
        mean_over_samples(rows, composite, "uniform_router", "normal", CRITERION_K, acc),
        "uniform_router at the criterion budget",
    )?;
    let base_normal = need(
        mean_over_samples(rows, composite, "base", "normal", 0, acc),
        "base on the composite task",
    )?;
    let routing = CriterionOutcome {
        id: "routing-margin".into(),
        passed: adapted >= uniform + 0.03 && adapted >= base_normal + 0.10,
        details: format!(
            "adapted {adapted:.4} vs uniform {uniform:.4} (needs +0.03) and base {base_normal:.4} (needs +0.10), k={CRITERION_K}, {} samples",
            cfg.data.n_seeds
        ),
    };

    let fewshot = need(
        mean_over_samples(rows, composite, "adapted_fewshot", "fewshot", CRITERION_K, acc),
        "adapted_fewshot rows",
    )?;
    let base_fewshot = need(
        mean_over_samples(rows, composite, "base", "fewshot", 0, acc),
        "base rows on the few-shot split",
    )?;
    let fewshot_outcome = CriterionOutcome {
        id: "fewshot-margin".into(),
        passed: fewshot >= base_fewshot + 0.05,
        details: format!(
            "few-shot {fewshot:.4} vs base {base_fewshot:.4} on the same test set (needs +0.05); zero backward passes asserted during adaptation"
        ),
    };

    let mut means = Vec::new();
    for &k in &cfg.data.sweep_ks {
        means.push((
            k,
            need(
                mean_over_samples(rows, composite, "adapted_normal", "normal", k, acc),
                "sweep rows",
            )?,
        ));
    }
    let monotone = means.windows(2).all(|w| w[1].1 >= w[0].1 - 0.01);
    let first = means.first().map(|&(_, m)| m).unwrap_or(f64::NAN);
    let last = means.last().map(|&(_, m)| m).unwrap_or(f64::NAN);
    let path: Vec<String> = means.iter().map(|&(k, m)| format!("k{k}={m:.4}")).collect();
    let scaling = CriterionOutcome {
        id: "skill-scaling".into(),
        passed: monotone && last >= first + 0.05,
        details: format!(
            "{} (each step may dip at most 0.01; last needs first +0.05)",
            path.join(" -> ")
        ),
    };

    let base_params = engine.base.param_count();
    let worst_adapter = engine
        .adapters
        .iter()
        .map(SkillAdapter::param_count)
        .max()
        .unwrap_or(0);
    let k_full = engine.k_full();
    let feature_width = engine.library(k_full)?.feature_width();
    let router_scalars = 2 * k_full; // static gate: K logits plus K biases
    let router_budget = 2 * k_full + k_full * feature_width;
    let budget = CriterionOutcome {
        id: "parameter-budget".into(),
        passed: worst_adapter * 10 < base_params && router_scalars <= router_budget,
        details: format!(
            "largest adapter {worst_adapter} of {base_params} base params ({:.2}%, needs <10%); router {router_scalars} scalars within {router_budget}",
            100.0 * worst_adapter as f64 / base_params as f64
        ),
    };

    Ok(vec![routing, fewshot_outcome, scaling, budget])
}

// ---------------------------------------------------------------------------
// audit
// ---------------------------------------------------------------------------

/// Verify that every artifact in the output directory matches the
/// manifest that claims it, and that nothing is unclaimed.
pub fn cmd_audit(cfg: &RunConfig) -> Result<()> {
    let out_root = &cfg.run.out_dir;
    let manifest_dir = out_root.join("manifests");
    require(&manifest_dir, "no manifests to audit")?;

    let mut manifest_files: Vec<PathBuf> = fs::read_dir(&manifest_dir)?
        .map(|e| Ok(e?.path()))
        .collect::<Result<Vec<_>>>()?;
    manifest_files.sort();

    let mut claimed: BTreeMap<String, (String, FileStamp)> = BTreeMap::new();
    let mut problems = Vec::new();
    for path in &manifest_files {
        let text = fs::read_to_string(path)?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Contract(format!("bad manifest {}: {e}", path.display())))?;
        let name = format!("{}-{}", manifest.command, manifest.qualifier);
        for out in manifest.outputs {
            if let Some((other, _)) = claimed.get(&out.path) {
                problems.push(format!(
                    "{} claimed by both {other} and {name}",
                    out.path
                ));
            }
            claimed.insert(out.path.clone(), (name.clone(), out));
        }
    }

    for (rel, (owner, want)) in &claimed {
        let path = out_root.join(rel);
        match fs::read(&path) {
            Err(_) => problems.push(format!("{rel} listed by {owner} but missing")),
            Ok(bytes) => {
                if bytes.len() as u64 != want.bytes || sha256_hex(&bytes) != want.sha256 {
                    problems.push(format!("{rel} does not match the digest from {owner}"));
                }
            }
        }
    }

    let mut on_disk = BTreeSet::new();
    collect_files(out_root, out_root, &mut on_disk)?;
    for rel in &on_disk {
        if rel.starts_with("manifests/") {
            continue;
        }
        if !claimed.contains_key(rel) {
            problems.push(format!("{rel} present but claimed by no manifest"));
        }
    }

    if problems.is_empty() {
        println!(
            "audit: {} manifests cover {} artifacts, all digests match",
            manifest_files.len(),
            claimed.len()
        );
        Ok(())
    } else {
        for p in &problems {
            println!("audit: {p}");
        }
        Err(Error::Contract(format!(
            "audit found {} problems",
            problems.len()
        )))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeSet<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.insert(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
