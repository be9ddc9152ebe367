//! Command-line entry point: dataset generation, training runs, rotation
//! evaluation, random hyperparameter search, explanation dumps, and report
//! aggregation.
//!
//! Configuration is one flat JSON object — every key addressable from the
//! command line as `--set key=value` — merged as defaults ← file ← overrides
//! ← `GVRT_SEED`. Every invocation materializes what it actually ran with
//! into `config.resolved.json` inside `--out`, so a run can be reproduced
//! from that file alone. Exit codes: 0 success; 1 invalid input (the message
//! names the offending key); 2 runtime failure with the run directory left
//! in place for post-mortem.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::batch::eval_batches;
use crate::data::split::{build_split_plan, SplitMode, SplitPlan};
use crate::data::synth::{generate, SynthSpec};
use crate::data::MultiDomainDataset;
use crate::error::{GvrtError, Result};
use crate::evalkit::{
    aggregate_report, evaluate_accuracy, export_embeddings, report_from_tables, Cell,
    ProtocolConfig, Report, ResultsTable, SeedAccuracy,
};
use crate::explainer::{reward, ExplanationRow};
use crate::nn;
use crate::trainer::{
    fit, load_checkpoint, prepare_state, sample_hyperparameters, save_checkpoint, Checkpoint,
    EncoderMode, ModelState, TrainConfig,
};

// ── Flat run configuration ──────────────────────────────────────────────────

/// Everything a run can be told, in one flat key space: the training
/// configuration plus split, protocol, search, and data-generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Row label in aggregated reports; derived from the mode when absent.
    pub run_name: Option<String>,
    pub split_mode: SplitMode,
    pub target_domains: Vec<u16>,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub eval_batch: usize,
    /// Trial seeds for `eval` rotations and `search` repetitions.
    pub seeds: Vec<u64>,
    pub search_draws: usize,
    /// Explanation rows kept per id set when dumping.
    pub explain_limit: usize,
    // Dataset generation (`gen-data`); `image_size` is shared with training.
    pub num_classes: usize,
    pub num_domains: usize,
    pub samples_per_class: usize,
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            run_name: None,
            split_mode: SplitMode::MultiSource,
            target_domains: vec![3],
            val_fraction: 0.2,
            test_fraction: 0.25,
            split_seed: 0,
            eval_batch: 64,
            seeds: vec![0, 1, 2],
            search_draws: 20,
            explain_limit: 16,
            num_classes: 8,
            num_domains: 4,
            samples_per_class: 20,
            data_seed: 0,
        }
    }
}

impl RunConfig {
    /// Report row label: explicit name, or derived from the training mode.
    pub fn label(&self) -> String {
        if let Some(name) = &self.run_name {
            return name.clone();
        }
        if self.train.encoder_mode == EncoderMode::Erm
            || (self.train.lambda_align == 0.0 && self.train.lambda_expl == 0.0)
        {
            return "erm".into();
        }
        let mode = serde_json::to_value(self.train.encoder_mode)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_else(|| "pte".into());
        format!("gvrt-{mode}")
    }

    fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            train: self.train.clone(),
            val_fraction: self.val_fraction,
            test_fraction: self.test_fraction,
            split_seed: self.split_seed,
            eval_batch: self.eval_batch,
        }
    }

    fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            num_classes: self.num_classes,
            num_domains: self.num_domains,
            image_size: self.train.image_size,
            samples_per_class_per_domain: self.samples_per_class,
            seed: self.data_seed,
        }
    }

    fn split(&self, ds: &MultiDomainDataset) -> Result<SplitPlan> {
        build_split_plan(
            ds,
            self.split_mode,
            &self.target_domains,
            self.val_fraction,
            self.test_fraction,
            self.split_seed,
        )
    }
}

// ── Config loading: defaults ← file ← --set overrides ← GVRT_SEED ───────────

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "a list",
        Value::Object(_) => "an object",
    }
}

fn valid_keys(defaults: &Value) -> String {
    let mut keys: Vec<&str> = defaults
        .as_object()
        .map(|o| o.keys().map(String::as_str).collect())
        .unwrap_or_default();
    keys.sort_unstable();
    keys.join(", ")
}

fn check_kind(key: &str, default: &Value, new: &Value) -> Result<()> {
    let ok = match (default, new) {
        // Optional string slots accept a string or an explicit null.
        (Value::Null, Value::String(_)) | (Value::Null, Value::Null) => true,
        (Value::Number(d), Value::Number(n)) => {
            if d.is_u64() && !n.is_u64() {
                return Err(GvrtError::Config(format!(
                    "{key}: expected a non-negative integer, got {n}"
                )));
            }
            true
        }
        (a, b) => kind_name(a) == kind_name(b),
    };
    if ok {
        Ok(())
    } else {
        Err(GvrtError::Config(format!(
            "{key}: expected {}, got {}",
            kind_name(default),
            kind_name(new)
        )))
    }
}

/// Merge a flat config file object over the defaults, rejecting unknown keys
/// and kind mismatches with messages that name the key.
fn merge_file(defaults: &mut Value, file: Value, origin: &Path) -> Result<()> {
    let obj = match file {
        Value::Object(o) => o,
        other => {
            return Err(GvrtError::Format {
                path: origin.into(),
                reason: format!("top level must be an object, found {}", kind_name(&other)),
            });
        }
    };
    let keys = valid_keys(defaults);
    let map = defaults.as_object_mut().expect("defaults serialize to an object");
    for (k, v) in obj {
        match map.get(&k) {
            None => {
                return Err(GvrtError::Config(format!(
                    "unknown config key '{k}'; valid keys: {keys}"
                )));
            }
            Some(current) => check_kind(&k, current, &v)?,
        }
        map.insert(k, v);
    }
    Ok(())
}

/// Parse a `--set` value against the current value's type so overrides stay
/// schema-checked: numbers parse as numbers, lists as JSON or comma-separated
/// integers, and so on.
fn coerce(key: &str, current: &Value, raw: &str) -> Result<Value> {
    let fail = |expected: &str| {
        Err(GvrtError::Config(format!("{key}: expected {expected}, got '{raw}'")))
    };
    match current {
        Value::Bool(_) => match raw.parse::<bool>() {
            Ok(b) => Ok(Value::Bool(b)),
            Err(_) => fail("true or false"),
        },
        Value::Number(n) if n.is_u64() => match raw.parse::<u64>() {
            Ok(v) => Ok(Value::Number(v.into())),
            Err(_) => fail("a non-negative integer"),
        },
        Value::Number(n) if n.is_i64() => match raw.parse::<i64>() {
            Ok(v) => Ok(Value::Number(v.into())),
            Err(_) => fail("an integer"),
        },
        Value::Number(_) => match raw.parse::<f64>().ok().and_then(serde_json::Number::from_f64) {
            Some(v) => Ok(Value::Number(v)),
            None => fail("a finite number"),
        },
        Value::String(_) | Value::Null => Ok(Value::String(raw.to_string())),
        Value::Array(_) => {
            if raw.trim_start().starts_with('[') {
                let v: Value = serde_json::from_str(raw)
                    .map_err(|e| GvrtError::Config(format!("{key}: {e}")))?;
                if v.is_array() {
                    Ok(v)
                } else {
                    fail("a JSON list")
                }
            } else {
                let mut items = Vec::new();
                for part in raw.split(',') {
                    match part.trim().parse::<u64>() {
                        Ok(v) => items.push(Value::Number(v.into())),
                        Err(_) => return fail("a comma-separated list of integers"),
                    }
                }
                Ok(Value::Array(items))
            }
        }
        Value::Object(_) => serde_json::from_str(raw)
            .map_err(|e| GvrtError::Config(format!("{key}: {e}"))),
    }
}

/// Apply one `key=value` (or `a.b.c=value`) override in place.
fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| {
        GvrtError::Config(format!("override '{assignment}' is not of the form key=value"))
    })?;
    if path.is_empty() {
        return Err(GvrtError::Config(format!(
            "override '{assignment}' has an empty key"
        )));
    }
    let keys = valid_keys(root);
    let mut cursor = &mut *root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let map = cursor.as_object_mut().ok_or_else(|| {
            GvrtError::Config(format!("{}: not a settable key", segments[..i].join(".")))
        })?;
        if !map.contains_key(*seg) {
            return Err(GvrtError::Config(format!(
                "unknown config key '{path}'; valid keys: {keys}"
            )));
        }
        if i + 1 == segments.len() {
            let current = map.get(*seg).unwrap().clone();
            let parsed = coerce(path, &current, raw)?;
            map.insert((*seg).to_string(), parsed);
            return Ok(());
        }
        cursor = map.get_mut(*seg).unwrap();
    }
    unreachable!("loop returns on the last segment");
}

/// Resolve a run configuration: defaults, then the optional file, then
/// `--set` overrides in order, then an environment seed override.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[String],
    env_seed: Option<&str>,
) -> Result<RunConfig> {
    let mut merged = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(p) = path {
        let raw = fs::read_to_string(p).map_err(|e| GvrtError::io(p, e))?;
        let file: Value = serde_json::from_str(&raw).map_err(|e| GvrtError::Format {
            path: p.into(),
            reason: e.to_string(),
        })?;
        merge_file(&mut merged, file, p)?;
    }
    for assignment in overrides {
        apply_override(&mut merged, assignment)?;
    }
    if let Some(raw) = env_seed {
        let seed: u64 = raw.parse().map_err(|_| {
            GvrtError::Config(format!("GVRT_SEED: expected a non-negative integer, got '{raw}'"))
        })?;
        merged["seed"] = Value::Number(seed.into());
    }
    let cfg: RunConfig = serde_json::from_value(merged)
        .map_err(|e| GvrtError::Config(format!("config: {e}")))?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).unwrap())
        .map_err(|e| GvrtError::io(path, e))
}

/// Materialize the fully resolved configuration into the output directory.
fn write_resolved(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| GvrtError::io(out, e))?;
    write_json(&out.join("config.resolved.json"), cfg)
}

// ── One training run directory ──────────────────────────────────────────────

/// What one finished training run reports back.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub label: String,
    pub best_step: u64,
    pub best_val_accuracy: f64,
    /// Target-domain test accuracies, percent.
    pub target_accuracies: Vec<(u16, f64)>,
    pub warnings: Vec<String>,
}

fn one_hot(labels: &[u16], num_classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; labels.len() * num_classes];
    for (b, &y) in labels.iter().enumerate() {
        out[b * num_classes + y as usize] = 1.0;
    }
    out
}

/// Greedy explanation rows for the given (domain, ids) sets, capped per set.
fn explanation_rows(
    state: &ModelState,
    ds: &MultiDomainDataset,
    sets: &[(u16, &[u32])],
    limit: usize,
    cfg: &TrainConfig,
) -> Result<Vec<ExplanationRow>> {
    let generator = state.generator.as_ref().ok_or_else(|| {
        GvrtError::Config("the plain baseline trains no generator; nothing to explain".into())
    })?;
    let heads = state.heads.as_ref().expect("generator implies projections");
    let k = state.num_classes;
    let mut rows = Vec::new();
    for &(domain, ids) in sets {
        let capped = &ids[..ids.len().min(limit)];
        for chunk in eval_batches(ds, capped, domain, 32)? {
            let per = ds.channels * ds.height * ds.width;
            let mut images = Vec::with_capacity(chunk.len() * per);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in &chunk {
                images.extend_from_slice(&ds.samples[i].image);
                labels.push(ds.samples[i].label);
            }
            let pass = state.encoder.forward(&images, chunk.len())?;
            let g_x = heads.g_proj.forward(&pass.features);
            let category = match cfg.category_source {
                crate::trainer::CategorySource::Pred => nn::softmax(&pass.logits, k),
                crate::trainer::CategorySource::Gold => one_hot(&labels, k),
            };
            let decoded = generator.greedy_decode(&g_x, &category, chunk.len(), cfg.max_len)?;
            for (row, &i) in chunk.iter().enumerate() {
                let s = &ds.samples[i];
                let predicted = nn::argmax(&pass.logits[row * k..(row + 1) * k]) as u16;
                let r = state
                    .reward_model
                    .as_ref()
                    .map(|rm| reward(rm, &decoded[row], s.label as usize))
                    .unwrap_or(f64::NAN);
                rows.push(ExplanationRow {
                    sample_id: s.id,
                    domain: s.domain,
                    true_class: s.label,
                    predicted_class: predicted,
                    sentence: state.vocab.decode(&decoded[row]),
                    reward: r,
                });
            }
        }
    }
    Ok(rows)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).unwrap());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| GvrtError::io(path, e))
}

/// Interesting id sets for artifact dumps: source validation and target test.
fn artifact_sets<'a>(plan: &'a SplitPlan) -> Vec<(u16, &'a [u32])> {
    let mut sets: Vec<(u16, &[u32])> = Vec::new();
    for d in plan.sources() {
        let val = plan.domains[d as usize].val.as_slice();
        if !val.is_empty() {
            sets.push((d, val));
        }
    }
    for &t in &plan.target_domains {
        let test = plan.domains[t as usize].test.as_slice();
        if !test.is_empty() {
            sets.push((t, test));
        }
    }
    sets
}

/// Fit one model and fill a run directory: training log, best and final
/// checkpoints, target-domain results, and (when the text stack exists)
/// joint-space embeddings and greedy explanations. The directory and its
/// config files must already exist.
fn execute_training(
    cfg: &RunConfig,
    ds: &MultiDomainDataset,
    out: &Path,
) -> Result<TrainSummary> {
    let plan = cfg.split(ds)?;
    plan.save(&out.join("split.json"))?;
    let result = fit(&cfg.train, ds, &plan)?;

    write_jsonl(&out.join("log.jsonl"), &result.log)?;
    save_checkpoint(&out.join("checkpoint.bin"), &result.best)?;

    let mut state = result.state;
    let last = Checkpoint {
        step: cfg.train.steps as u64,
        val_accuracy: result
            .log
            .iter()
            .rev()
            .find_map(|r| r.val_accuracy)
            .unwrap_or(f64::NAN),
        params: state.snapshot(),
    };
    save_checkpoint(&out.join("checkpoint.last.bin"), &last)?;

    // Every later artifact comes from the selected checkpoint.
    state.restore(&result.best.params)?;

    let source_for_cell = match cfg.split_mode {
        SplitMode::SingleSource => plan.sources().first().copied(),
        SplitMode::MultiSource => None,
    };
    let mut cells = Vec::new();
    let mut target_accuracies = Vec::new();
    for &t in &plan.target_domains {
        let ids = &plan.domains[t as usize].test;
        let acc = evaluate_accuracy(&state, ds, ids, t, cfg.eval_batch)?;
        target_accuracies.push((t, acc));
        cells.push(Cell {
            source: source_for_cell,
            target: t,
            seed_accuracies: vec![SeedAccuracy { seed: cfg.train.seed, accuracy: acc }],
            failures: Vec::new(),
        });
    }
    ResultsTable {
        protocol: cfg.split_mode,
        num_domains: ds.num_domains,
        domain_names: ds.domain_names.clone(),
        cells,
    }
    .save(&out.join("results.json"))?;

    let sets = artifact_sets(&plan);
    if state.heads.is_some() && !sets.is_empty() {
        export_embeddings(&state, ds, &sets, &out.join("embeddings.tsv"))?;
    }
    if state.generator.is_some() && !sets.is_empty() {
        let rows = explanation_rows(&state, ds, &sets, cfg.explain_limit, &cfg.train)?;
        write_jsonl(&out.join("explanations.jsonl"), &rows)?;
    }

    Ok(TrainSummary {
        label: cfg.label(),
        best_step: result.best.step,
        best_val_accuracy: result.best.val_accuracy,
        target_accuracies,
        warnings: result.warnings,
    })
}

/// Prepare the run directory and train, preserving the directory (with a
/// `failure.json` post-mortem note) if anything fails after creation.
pub fn run_training(cfg: &RunConfig, ds: &MultiDomainDataset, out: &Path) -> Result<TrainSummary> {
    write_resolved(out, cfg)?;
    write_json(&out.join("config.json"), cfg)?;
    match execute_training(cfg, ds, out) {
        Ok(summary) => Ok(summary),
        Err(e) => {
            let note = serde_json::json!({ "error": e.to_string() });
            let _ = write_json(&out.join("failure.json"), &note);
            Err(e)
        }
    }
}

// ── Search ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
struct TrialFailure {
    dir: PathBuf,
    label: String,
    seed: u64,
    reason: String,
}

/// Random hyperparameter search: `draws` draws × one trial per seed, each in
/// its own run directory, aggregated into one report. Trials run in a worker
/// pool (capped by `GVRT_WORKERS`); failures are recorded and skipped.
pub fn run_search(
    cfg: &RunConfig,
    ds: &MultiDomainDataset,
    out: &Path,
    draws: usize,
    workers: Option<usize>,
) -> Result<Report> {
    if draws == 0 {
        return Err(GvrtError::Config("search_draws: must be >= 1".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(GvrtError::Config("seeds: must list at least one seed".into()));
    }
    let hp = sample_hyperparameters(cfg.train.seed, draws);
    let mut trials: Vec<(RunConfig, PathBuf)> = Vec::new();
    for (i, draw) in hp.iter().enumerate() {
        for &seed in &cfg.seeds {
            let mut trial = cfg.clone();
            draw.apply(&mut trial.train);
            trial.train.seed = seed;
            trial.run_name = Some(format!("draw-{i:02}"));
            let dir = out.join(format!("draw-{i:02}-seed-{seed}"));
            trials.push((trial, dir));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| GvrtError::Config(format!("GVRT_WORKERS: {e}")))?;
    let failures: Mutex<Vec<TrialFailure>> = Mutex::new(Vec::new());
    let successes: Mutex<Vec<PathBuf>> = Mutex::new(Vec::new());
    pool.install(|| {
        trials.par_iter().for_each(|(trial, dir)| {
            match run_training(trial, ds, dir) {
                Ok(_) => successes.lock().unwrap().push(dir.clone()),
                Err(e) => failures.lock().unwrap().push(TrialFailure {
                    dir: dir.clone(),
                    label: trial.label(),
                    seed: trial.train.seed,
                    reason: e.to_string(),
                }),
            }
        });
    });

    let failures = failures.into_inner().unwrap();
    if !failures.is_empty() {
        write_json(&out.join("failures.json"), &failures)?;
        for f in &failures {
            eprintln!("warning: trial {} (seed {}) failed: {}", f.label, f.seed, f.reason);
        }
    }
    let mut succeeded = successes.into_inner().unwrap();
    succeeded.sort();
    if succeeded.is_empty() {
        return Err(GvrtError::Config(format!(
            "all {} trials failed; see failures.json under {}",
            trials.len(),
            out.display()
        )));
    }
    let report = aggregate_report(&succeeded)?;
    fs::write(out.join("report.md"), &report.markdown)
        .map_err(|e| GvrtError::io(out.join("report.md"), e))?;
    write_json(&out.join("report.json"), &report.summary)?;

    // Record the winning draw with its sampled values.
    if let Some(best) = report
        .summary
        .rows
        .iter()
        .filter(|r| r.average.is_some())
        .max_by(|a, b| a.average.partial_cmp(&b.average).unwrap())
    {
        let idx: Option<usize> = best
            .label
            .strip_prefix("draw-")
            .and_then(|s| s.parse().ok());
        if let Some(i) = idx {
            let d = &hp[i];
            write_json(
                &out.join("best_draw.json"),
                &serde_json::json!({
                    "label": best.label,
                    "mean_accuracy": best.average,
                    "lr": d.lr,
                    "weight_decay": d.weight_decay,
                    "dropout": d.dropout,
                    "batch": d.batch,
                }),
            )?;
        }
    }
    Ok(report)
}

// ── CLI ─────────────────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "gvrt",
    about = "Train and evaluate language-grounded image classifiers across visual domains",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset directory.
    GenData {
        /// Flat JSON config file; defaults apply for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, e.g. --set num_classes=8.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rotate targets through the full protocol and aggregate the results.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random hyperparameter search over seeded trials.
    Search {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of random draws (default: the search_draws config key).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Re-generate greedy explanations from a finished run.
    Explain {
        /// Run directory holding config.resolved.json and checkpoint.bin.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rows kept per id set (default: the explain_limit config key).
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Aggregate run directories into one table.
    Report {
        /// Run directories to pool (repeat the flag or list several paths).
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn env_seed() -> Option<String> {
    std::env::var("GVRT_SEED").ok()
}

fn env_workers() -> Result<Option<usize>> {
    match std::env::var("GVRT_WORKERS") {
        Err(_) => Ok(None),
        Ok(raw) => raw
            .parse::<usize>()
            .map(Some)
            .map_err(|_| {
                GvrtError::Config(format!(
                    "GVRT_WORKERS: expected a positive integer, got '{raw}'"
                ))
            }),
    }
}

fn cmd_gen_data(config: Option<&Path>, overrides: &[String], out: &Path) -> Result<()> {
    let cfg = load_config(config, overrides, env_seed().as_deref())?;
    let ds = generate(&cfg.synth_spec())?;
    ds.save(out)?;
    write_resolved(out, &cfg)?;
    println!(
        "wrote {} samples ({} classes x {} domains x {}x{} px) to {}",
        ds.samples.len(),
        ds.num_classes,
        ds.num_domains,
        ds.height,
        ds.width,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    overrides: &[String],
    data: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config, overrides, env_seed().as_deref())?;
    let ds = MultiDomainDataset::load(data)?;
    let summary = run_training(&cfg, &ds, out)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "run '{}': best step {} (source-val accuracy {:.1}%)",
        summary.label, summary.best_step, 100.0 * summary.best_val_accuracy
    );
    for (t, acc) in &summary.target_accuracies {
        let name = ds
            .domain_names
            .get(*t as usize)
            .cloned()
            .unwrap_or_else(|| format!("domain-{t}"));
        println!("target {name}: {acc:.1}%");
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_eval(
    config: Option<&Path>,
    overrides: &[String],
    data: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config, overrides, env_seed().as_deref())?;
    let ds = MultiDomainDataset::load(data)?;
    write_resolved(out, &cfg)?;
    let table = match cfg.split_mode {
        SplitMode::MultiSource => crate::evalkit::run_multi_source(&ds, &cfg.protocol(), &cfg.seeds)?,
        SplitMode::SingleSource => {
            crate::evalkit::run_single_source(&ds, &cfg.protocol(), &cfg.seeds)?
        }
    };
    table.save(&out.join("results.json"))?;
    let report = report_from_tables(vec![(cfg.label(), table)])?;
    fs::write(out.join("report.md"), &report.markdown)
        .map_err(|e| GvrtError::io(out.join("report.md"), e))?;
    write_json(&out.join("report.json"), &report.summary)?;
    print!("{}", report.markdown);
    Ok(())
}

fn cmd_search(
    config: Option<&Path>,
    overrides: &[String],
    data: &Path,
    out: &Path,
    n: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config, overrides, env_seed().as_deref())?;
    let ds = MultiDomainDataset::load(data)?;
    write_resolved(out, &cfg)?;
    let draws = n.unwrap_or(cfg.search_draws);
    let report = run_search(&cfg, &ds, out, draws, env_workers()?)?;
    print!("{}", report.markdown);
    Ok(())
}

fn cmd_explain(run: &Path, data: &Path, out: &Path, limit: Option<usize>) -> Result<()> {
    let cfg = load_config(Some(&run.join("config.resolved.json")), &[], None)?;
    let ds = MultiDomainDataset::load(data)?;
    let plan = cfg.split(&ds)?;
    let (mut state, _, _) = prepare_state(&cfg.train, &ds, &plan)?;
    let ckpt = load_checkpoint(&run.join("checkpoint.bin"))?;
    state.restore(&ckpt.params)?;
    let sets = artifact_sets(&plan);
    let rows = explanation_rows(
        &state,
        &ds,
        &sets,
        limit.unwrap_or(cfg.explain_limit),
        &cfg.train,
    )?;
    fs::create_dir_all(out).map_err(|e| GvrtError::io(out, e))?;
    write_json(
        &out.join("config.resolved.json"),
        &serde_json::json!({
            "command": "explain",
            "run": run,
            "limit": limit.unwrap_or(cfg.explain_limit),
        }),
    )?;
    write_jsonl(&out.join("explanations.jsonl"), &rows)?;
    println!("wrote {} explanations to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let report = aggregate_report(runs)?;
    fs::create_dir_all(out).map_err(|e| GvrtError::io(out, e))?;
    write_json(
        &out.join("config.resolved.json"),
        &serde_json::json!({ "command": "report", "runs": runs }),
    )?;
    fs::write(out.join("report.md"), &report.markdown)
        .map_err(|e| GvrtError::io(out.join("report.md"), e))?;
    write_json(&out.join("report.json"), &report.summary)?;
    print!("{}", report.markdown);
    Ok(())
}

/// Run the CLI against explicit arguments and return the process exit code.
pub fn cli_run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenData { config, overrides, out } => {
            cmd_gen_data(config.as_deref(), overrides, out)
        }
        Command::Train { config, overrides, data, out } => {
            cmd_train(config.as_deref(), overrides, data, out)
        }
        Command::Eval { config, overrides, data, out } => {
            cmd_eval(config.as_deref(), overrides, data, out)
        }
        Command::Search { config, overrides, data, out, n } => {
            cmd_search(config.as_deref(), overrides, data, out, *n)
        }
        Command::Explain { run, data, out, limit } => cmd_explain(run, data, out, *limit),
        Command::Report { runs, out } => cmd_report(runs, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Entry point for the installed binary.
pub fn cli_main() -> i32 {
    cli_run(std::env::args_os())
}
