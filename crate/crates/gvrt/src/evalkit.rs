//! Evaluation toolkit: domain-rotation accuracy protocols, caption quality
//! metrics, representation diagnostics, embedding export, and multi-run
//! report aggregation.
//!
//! The two protocols mirror the standard generalization setups: rotate every
//! domain through the held-out-target role with the rest as sources, or train
//! on one source domain at a time and test on each of the others. Metrics are
//! pure functions; protocol runners record per-seed accuracies (and failures)
//! per cell so every aggregate is recomputable from what's stored.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::batch::eval_batches;
use crate::data::split::{build_split_plan, SplitMode};
use crate::data::MultiDomainDataset;
use crate::error::{GvrtError, Result};
use crate::nn;
use crate::trainer::{fit, ModelState, TrainConfig};

// ── Accuracy ────────────────────────────────────────────────────────────────

/// Percent of predictions equal to their labels. Empty input is an error.
pub fn accuracy_percent(predictions: &[usize], labels: &[u16]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(GvrtError::Config("accuracy over an empty id list".into()));
    }
    if predictions.len() != labels.len() {
        return Err(GvrtError::Config(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|&(&p, &y)| p == y as usize)
        .count();
    Ok(100.0 * correct as f64 / predictions.len() as f64)
}

/// Argmax class per sample (ties resolve to the lowest class id).
pub fn predict_classes(
    state: &ModelState,
    ds: &MultiDomainDataset,
    ids: &[u32],
    domain: u16,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in eval_batches(ds, ids, domain, batch_size)? {
        let per = ds.channels * ds.height * ds.width;
        let mut images = Vec::with_capacity(chunk.len() * per);
        for &i in &chunk {
            images.extend_from_slice(&ds.samples[i].image);
        }
        let pass = state.encoder.forward(&images, chunk.len())?;
        for row in pass.logits.chunks(state.num_classes) {
            out.push(nn::argmax(row));
        }
    }
    Ok(out)
}

/// Accuracy (in percent) of the model on the given ids of one domain.
pub fn evaluate_accuracy(
    state: &ModelState,
    ds: &MultiDomainDataset,
    ids: &[u32],
    domain: u16,
    batch_size: usize,
) -> Result<f64> {
    if ids.is_empty() {
        return Err(GvrtError::Config("accuracy over an empty id list".into()));
    }
    let predictions = predict_classes(state, ds, ids, domain, batch_size)?;
    let labels: Vec<u16> = ids
        .iter()
        .map(|&id| ds.label_of(id).expect("id validated by eval_batches"))
        .collect();
    accuracy_percent(&predictions, &labels)
}

// ── Protocol runners ────────────────────────────────────────────────────────

/// Training configuration plus the split parameters shared by every rotation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub train: TrainConfig,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// One split per rotation, shared by every seed, drawn from this seed.
    pub split_seed: u64,
    pub eval_batch: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            train: TrainConfig::default(),
            val_fraction: 0.2,
            test_fraction: 0.25,
            split_seed: 0,
            eval_batch: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedAccuracy {
    pub seed: u64,
    /// Percent in `[0, 100]`.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub reason: String,
}

/// One (source-configuration, target-domain) cell with its per-seed results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cell {
    /// `None` when the sources are "every non-target domain".
    pub source: Option<u16>,
    pub target: u16,
    pub seed_accuracies: Vec<SeedAccuracy>,
    /// Seeds whose training failed, with the reason — recorded, not fatal.
    pub failures: Vec<SeedFailure>,
}

impl Cell {
    pub fn mean(&self) -> Option<f64> {
        if self.seed_accuracies.is_empty() {
            return None;
        }
        let n = self.seed_accuracies.len() as f64;
        Some(self.seed_accuracies.iter().map(|s| s.accuracy).sum::<f64>() / n)
    }

    /// Population standard deviation over the stored per-seed accuracies.
    pub fn population_std(&self) -> Option<f64> {
        let mean = self.mean()?;
        let n = self.seed_accuracies.len() as f64;
        let var = self
            .seed_accuracies
            .iter()
            .map(|s| (s.accuracy - mean).powi(2))
            .sum::<f64>()
            / n;
        Some(var.sqrt())
    }
}

/// All cells of one protocol run, with enough context to render a table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultsTable {
    pub protocol: SplitMode,
    pub num_domains: usize,
    pub domain_names: Vec<String>,
    pub cells: Vec<Cell>,
}

impl ResultsTable {
    /// Mean of the cell means that exist.
    pub fn overall_average(&self) -> Option<f64> {
        let means: Vec<f64> = self.cells.iter().filter_map(Cell::mean).collect();
        if means.is_empty() {
            None
        } else {
            Some(means.iter().sum::<f64>() / means.len() as f64)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self).unwrap())
            .map_err(|e| GvrtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| GvrtError::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| GvrtError::Format {
            path: path.into(),
            reason: e.to_string(),
        })
    }
}

fn fit_and_score(
    ds: &MultiDomainDataset,
    cfg: &ProtocolConfig,
    plan: &crate::data::split::SplitPlan,
    seed: u64,
    targets: &[u16],
) -> Result<Vec<(u16, f64)>> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let mut result = fit(&train_cfg, ds, plan)?;
    result.state.restore(&result.best.params)?;
    let mut scores = Vec::with_capacity(targets.len());
    for &t in targets {
        let ids = &plan.domains[t as usize].test;
        let acc = evaluate_accuracy(&result.state, ds, ids, t, cfg.eval_batch)?;
        scores.push((t, acc));
    }
    Ok(scores)
}

/// Rotate every domain through the target role; the others are sources.
/// Each rotation trains once per seed on a shared split and evaluates on the
/// target's held-out test ids. Training failures become cell markers.
pub fn run_multi_source(
    ds: &MultiDomainDataset,
    cfg: &ProtocolConfig,
    seeds: &[u64],
) -> Result<ResultsTable> {
    if ds.num_domains < 2 {
        return Err(GvrtError::Config(format!(
            "domain rotation needs at least 2 domains, got {}",
            ds.num_domains
        )));
    }
    if seeds.is_empty() {
        return Err(GvrtError::Config("no seeds given".into()));
    }
    let mut cells = Vec::new();
    for target in 0..ds.num_domains as u16 {
        let plan = build_split_plan(
            ds,
            SplitMode::MultiSource,
            &[target],
            cfg.val_fraction,
            cfg.test_fraction,
            cfg.split_seed,
        )?;
        let mut cell =
            Cell { source: None, target, seed_accuracies: Vec::new(), failures: Vec::new() };
        for &seed in seeds {
            match fit_and_score(ds, cfg, &plan, seed, &[target]) {
                Ok(scores) => cell
                    .seed_accuracies
                    .push(SeedAccuracy { seed, accuracy: scores[0].1 }),
                Err(e) => cell.failures.push(SeedFailure { seed, reason: e.to_string() }),
            }
        }
        cells.push(cell);
    }
    Ok(ResultsTable {
        protocol: SplitMode::MultiSource,
        num_domains: ds.num_domains,
        domain_names: ds.domain_names.clone(),
        cells,
    })
}

/// Train on each domain alone and test on every other domain: an
/// (source × target) matrix with an empty diagonal.
pub fn run_single_source(
    ds: &MultiDomainDataset,
    cfg: &ProtocolConfig,
    seeds: &[u64],
) -> Result<ResultsTable> {
    if ds.num_domains < 2 {
        return Err(GvrtError::Config(format!(
            "domain rotation needs at least 2 domains, got {}",
            ds.num_domains
        )));
    }
    if seeds.is_empty() {
        return Err(GvrtError::Config("no seeds given".into()));
    }
    let m = ds.num_domains as u16;
    let mut cells = Vec::new();
    for source in 0..m {
        let targets: Vec<u16> = (0..m).filter(|&d| d != source).collect();
        let plan = build_split_plan(
            ds,
            SplitMode::SingleSource,
            &targets,
            cfg.val_fraction,
            cfg.test_fraction,
            cfg.split_seed,
        )?;
        let mut row: BTreeMap<u16, Cell> = targets
            .iter()
            .map(|&t| {
                (
                    t,
                    Cell {
                        source: Some(source),
                        target: t,
                        seed_accuracies: Vec::new(),
                        failures: Vec::new(),
                    },
                )
            })
            .collect();
        for &seed in seeds {
            match fit_and_score(ds, cfg, &plan, seed, &targets) {
                Ok(scores) => {
                    for (t, acc) in scores {
                        row.get_mut(&t)
                            .unwrap()
                            .seed_accuracies
                            .push(SeedAccuracy { seed, accuracy: acc });
                    }
                }
                Err(e) => {
                    for cell in row.values_mut() {
                        cell.failures.push(SeedFailure { seed, reason: e.to_string() });
                    }
                }
            }
        }
        cells.extend(row.into_values());
    }
    Ok(ResultsTable {
        protocol: SplitMode::SingleSource,
        num_domains: ds.num_domains,
        domain_names: ds.domain_names.clone(),
        cells,
    })
}

// ── Caption metrics ─────────────────────────────────────────────────────────

/// Corpus-level caption scores, both in `[0, 100]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CaptionScore {
    pub bleu4: f64,
    pub rouge_l: f64,
}

/// Both caption metrics over one corpus.
pub fn caption_scores(hypotheses: &[String], references: &[Vec<String>]) -> Result<CaptionScore> {
    Ok(CaptionScore {
        bleu4: bleu4(hypotheses, references)?,
        rouge_l: rouge_l(hypotheses, references)?,
    })
}

fn tokenize(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn ngram_counts<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

struct PairStats {
    matches: [usize; 4],
    totals: [usize; 4],
    hyp_len: usize,
    ref_len: usize,
}

/// Clipped n-gram matches (n = 1..4) for one hypothesis against its
/// references, plus the hypothesis length and the effective reference length
/// (closest to the hypothesis; ties break toward the shorter).
fn pair_stats(hyp: &str, refs: &[String]) -> Result<PairStats> {
    if refs.is_empty() {
        return Err(GvrtError::Config("hypothesis without references".into()));
    }
    let htoks = tokenize(hyp);
    let rtoks: Vec<Vec<&str>> = refs.iter().map(|r| tokenize(r)).collect();
    let hyp_len = htoks.len();
    let ref_len = rtoks
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(hyp_len), l))
        .unwrap();
    let mut stats = PairStats { matches: [0; 4], totals: [0; 4], hyp_len, ref_len };
    for n in 1..=4 {
        let hcounts = ngram_counts(&htoks, n);
        stats.totals[n - 1] = htoks.len().saturating_sub(n - 1);
        let mut clipped: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in &rtoks {
            for (g, c) in ngram_counts(r, n) {
                let e = clipped.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        stats.matches[n - 1] = hcounts
            .iter()
            .map(|(g, &c)| c.min(clipped.get(g).copied().unwrap_or(0)))
            .sum();
    }
    Ok(stats)
}

/// Corpus-level 4-gram precision score: geometric mean of clipped n-gram
/// precisions (n = 1..4) times a brevity penalty, scaled to `[0, 100]`.
/// No smoothing: a corpus with zero matches at any order scores 0.
pub fn bleu4(hypotheses: &[String], references: &[Vec<String>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(GvrtError::Config(format!(
            "{} hypotheses vs {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Ok(0.0);
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, refs) in hypotheses.iter().zip(references) {
        let s = pair_stats(h, refs)?;
        for n in 0..4 {
            matches[n] += s.matches[n];
            totals[n] += s.totals[n];
        }
        hyp_len += s.hyp_len;
        ref_len += s.ref_len;
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_precision = 0.0;
    for n in 0..4 {
        if totals[n] == 0 || matches[n] == 0 {
            return Ok(0.0);
        }
        log_precision += (matches[n] as f64 / totals[n] as f64).ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_precision / 4.0).exp())
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(curr[j]) };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F-measure averaged over the corpus, with the
/// balanced harmonic mean (β = 1): F = 2PR / (P + R). Multiple references
/// score by the best reference. Scaled to `[0, 100]`.
pub fn rouge_l(hypotheses: &[String], references: &[Vec<String>]) -> Result<f64> {
    rouge_l_with_beta(hypotheses, references, 1.0)
}

/// As [`rouge_l`] but with an explicit β: F = (1+β²)PR / (R + β²P). Large β
/// weights recall, approaching R alone.
pub fn rouge_l_with_beta(
    hypotheses: &[String],
    references: &[Vec<String>],
    beta: f64,
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(GvrtError::Config(format!(
            "{} hypotheses vs {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Ok(0.0);
    }
    if !(beta > 0.0) {
        return Err(GvrtError::Config(format!("beta must be > 0, got {beta}")));
    }
    let b2 = beta * beta;
    let mut sum = 0.0;
    for (h, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(GvrtError::Config("hypothesis without references".into()));
        }
        let htoks = tokenize(h);
        let mut best = 0.0f64;
        for r in refs {
            let rtoks = tokenize(r);
            let lcs = lcs_len(&htoks, &rtoks);
            if lcs == 0 {
                continue;
            }
            let p = lcs as f64 / htoks.len() as f64;
            let rc = lcs as f64 / rtoks.len() as f64;
            let f = (1.0 + b2) * p * rc / (rc + b2 * p);
            best = best.max(f);
        }
        sum += best;
    }
    Ok(100.0 * sum / hypotheses.len() as f64)
}

// ── Representation diagnostics ──────────────────────────────────────────────

/// Ratio of mean same-class *cross-domain* distance to mean same-class
/// *within-domain* distance. Lower means renderings of one class cluster
/// together regardless of domain.
pub fn alignment_ratio(
    vectors: &[f64],
    dim: usize,
    labels: &[u16],
    domains: &[u16],
) -> Result<f64> {
    let n = labels.len();
    if domains.len() != n || vectors.len() != n * dim || dim == 0 {
        return Err(GvrtError::Config(format!(
            "alignment ratio shape mismatch: {} values, dim {dim}, {} labels, {} domains",
            vectors.len(),
            n,
            domains.len()
        )));
    }
    let dist = |i: usize, j: usize| -> f64 {
        vectors[i * dim..(i + 1) * dim]
            .iter()
            .zip(&vectors[j * dim..(j + 1) * dim])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let (mut cross_sum, mut cross_n) = (0.0, 0usize);
    let (mut within_sum, mut within_n) = (0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] != labels[j] {
                continue;
            }
            let d = dist(i, j);
            if domains[i] == domains[j] {
                within_sum += d;
                within_n += 1;
            } else {
                cross_sum += d;
                cross_n += 1;
            }
        }
    }
    if cross_n == 0 || within_n == 0 {
        return Err(GvrtError::Config(
            "alignment ratio needs same-class pairs both within and across domains".into(),
        ));
    }
    let within = within_sum / within_n as f64;
    if within == 0.0 {
        return Err(GvrtError::Config(
            "all within-domain same-class pairs coincide; ratio undefined".into(),
        ));
    }
    Ok((cross_sum / cross_n as f64) / within)
}

/// Trace of the (population) covariance of row vectors — the total variance.
/// A collapsed representation drives this toward zero.
pub fn covariance_trace(vectors: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || vectors.is_empty() || vectors.len() % dim != 0 {
        return Err(GvrtError::Config(format!(
            "covariance trace over {} values with dim {dim}",
            vectors.len()
        )));
    }
    let n = vectors.len() / dim;
    let mut trace = 0.0;
    for j in 0..dim {
        let mean = (0..n).map(|i| vectors[i * dim + j]).sum::<f64>() / n as f64;
        trace += (0..n).map(|i| (vectors[i * dim + j] - mean).powi(2)).sum::<f64>() / n as f64;
    }
    Ok(trace)
}

// ── Embedding export ────────────────────────────────────────────────────────

/// Write joint-space projections of the given (domain, ids) sets as TSV:
/// `id  domain  label  v0 … v{d_joint−1}`. Deterministic for a fixed model.
pub fn export_embeddings(
    state: &ModelState,
    ds: &MultiDomainDataset,
    sets: &[(u16, &[u32])],
    path: &Path,
) -> Result<()> {
    let heads = state.heads.as_ref().ok_or_else(|| {
        GvrtError::Config(
            "embedding export needs the projection stack; the plain baseline has none".into(),
        )
    })?;
    let d_joint = heads.d_joint;
    let mut out = String::new();
    out.push_str("id\tdomain\tlabel");
    for j in 0..d_joint {
        out.push_str(&format!("\tv{j}"));
    }
    out.push('\n');
    for &(domain, ids) in sets {
        for chunk in eval_batches(ds, ids, domain, 64)? {
            let per = ds.channels * ds.height * ds.width;
            let mut images = Vec::with_capacity(chunk.len() * per);
            for &i in &chunk {
                images.extend_from_slice(&ds.samples[i].image);
            }
            let pass = state.encoder.forward(&images, chunk.len())?;
            let g_x = heads.g_proj.forward(&pass.features);
            for (row, &i) in chunk.iter().enumerate() {
                let s = &ds.samples[i];
                out.push_str(&format!("{}\t{}\t{}", s.id, s.domain, s.label));
                for &v in &g_x[row * d_joint..(row + 1) * d_joint] {
                    out.push_str(&format!("\t{v}"));
                }
                out.push('\n');
            }
        }
    }
    fs::write(path, out).map_err(|e| GvrtError::io(path, e))
}

// ── Report aggregation ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportCell {
    pub source: Option<u16>,
    pub target: u16,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub runs: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub source: Option<u16>,
    pub cells: Vec<ReportCell>,
    pub average: Option<f64>,
}

/// Machine-readable aggregate across run directories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub protocol: SplitMode,
    /// Spread statistic recorded for transparency: population, not sample.
    pub std_kind: String,
    pub decimals: usize,
    pub domain_names: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// Aggregated results with both renderings.
#[derive(Debug, Clone)]
pub struct Report {
    pub summary: ReportSummary,
    pub markdown: String,
}

/// Derive a row label for a run directory from its stored configuration.
fn run_label(dir: &Path) -> String {
    let cfg_path = dir.join("config.json");
    if let Ok(raw) = fs::read_to_string(&cfg_path) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&raw) {
            if let Some(name) = v.get("run_name").and_then(|x| x.as_str()) {
                return name.to_string();
            }
            let la = v.get("lambda_align").and_then(|x| x.as_f64()).unwrap_or(1.0);
            let le = v.get("lambda_expl").and_then(|x| x.as_f64()).unwrap_or(1.0);
            let mode = v.get("encoder_mode").and_then(|x| x.as_str()).unwrap_or("pte");
            if mode == "erm" || (la == 0.0 && le == 0.0) {
                return "erm".into();
            }
            return format!("gvrt-{mode}");
        }
    }
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn round_to(v: f64, decimals: usize) -> f64 {
    let p = 10f64.powi(decimals as i32);
    (v * p).round() / p
}

/// Pool `results.json` across run directories sharing a protocol, grouping by
/// run label, and render a text table (best value per column bold) plus a
/// machine-readable summary. Mean ± population std, one decimal.
pub fn aggregate_report(run_dirs: &[PathBuf]) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(GvrtError::Config("no run directories given".into()));
    }
    let mut loaded: Vec<(String, ResultsTable)> = Vec::new();
    for dir in run_dirs {
        let table = ResultsTable::load(&dir.join("results.json"))?;
        loaded.push((run_label(dir), table));
    }
    report_from_tables(loaded)
}

/// Aggregate already-loaded `(label, table)` pairs; see [`aggregate_report`].
pub fn report_from_tables(loaded: Vec<(String, ResultsTable)>) -> Result<Report> {
    if loaded.is_empty() {
        return Err(GvrtError::Config("no results to report".into()));
    }
    let protocol = loaded[0].1.protocol;
    let domain_names = loaded[0].1.domain_names.clone();
    for (label, t) in &loaded {
        if t.protocol != protocol {
            return Err(GvrtError::Config(format!(
                "run '{label}' uses a different protocol; reports cannot mix them"
            )));
        }
    }

    // Pool cells per (label, source, target).
    let mut pooled: BTreeMap<(String, Option<u16>, u16), Cell> = BTreeMap::new();
    for (label, table) in loaded {
        for cell in table.cells {
            let key = (label.clone(), cell.source, cell.target);
            let entry = pooled.entry(key).or_insert_with(|| Cell {
                source: cell.source,
                target: cell.target,
                seed_accuracies: Vec::new(),
                failures: Vec::new(),
            });
            entry.seed_accuracies.extend(cell.seed_accuracies);
            entry.failures.extend(cell.failures);
        }
    }

    let targets: Vec<u16> = {
        let mut t: Vec<u16> = pooled.keys().map(|k| k.2).collect();
        t.sort_unstable();
        t.dedup();
        t
    };

    // One row per (label, source).
    let mut rows: Vec<ReportRow> = Vec::new();
    {
        let mut grouped: BTreeMap<(String, Option<u16>), Vec<&Cell>> = BTreeMap::new();
        for ((label, source, _), cell) in &pooled {
            grouped.entry((label.clone(), *source)).or_default().push(cell);
        }
        for ((label, source), cells) in grouped {
            let report_cells: Vec<ReportCell> = cells
                .iter()
                .map(|c| ReportCell {
                    source: c.source,
                    target: c.target,
                    mean: c.mean(),
                    std: c.population_std(),
                    runs: c.seed_accuracies.len(),
                    failures: c.failures.len(),
                })
                .collect();
            let means: Vec<f64> = report_cells.iter().filter_map(|c| c.mean).collect();
            let average = if means.is_empty() {
                None
            } else {
                Some(means.iter().sum::<f64>() / means.len() as f64)
            };
            rows.push(ReportRow { label, source, cells: report_cells, average });
        }
    }

    let decimals = 1usize;
    let markdown = render_markdown(&rows, &targets, &domain_names, protocol, decimals);
    Ok(Report {
        summary: ReportSummary {
            protocol,
            std_kind: "population".into(),
            decimals,
            domain_names,
            rows,
        },
        markdown,
    })
}

fn fmt_cell(mean: Option<f64>, std: Option<f64>, runs: usize, decimals: usize) -> String {
    match mean {
        None => "n/a".into(),
        Some(m) => {
            if runs > 1 {
                let s = std.unwrap_or(0.0);
                format!("{:.d$} ± {:.d$}", m, s, d = decimals)
            } else {
                format!("{:.d$}", m, d = decimals)
            }
        }
    }
}

fn render_markdown(
    rows: &[ReportRow],
    targets: &[u16],
    domain_names: &[String],
    protocol: SplitMode,
    decimals: usize,
) -> String {
    let name_of = |d: u16| {
        domain_names
            .get(d as usize)
            .cloned()
            .unwrap_or_else(|| format!("domain-{d}"))
    };
    // Best (rounded) mean per target column and for the average column.
    let best_for_target = |t: u16| -> Option<f64> {
        rows.iter()
            .flat_map(|r| r.cells.iter().filter(|c| c.target == t).filter_map(|c| c.mean))
            .map(|m| round_to(m, decimals))
            .fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.max(m))))
    };
    let best_avg = rows
        .iter()
        .filter_map(|r| r.average)
        .map(|m| round_to(m, decimals))
        .fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.max(m))));

    let single = protocol == SplitMode::SingleSource;
    let mut md = String::new();
    md.push_str("| run |");
    if single {
        md.push_str(" source |");
    }
    for &t in targets {
        md.push_str(&format!(" {} |", name_of(t)));
    }
    md.push_str(" avg |\n|---|");
    if single {
        md.push_str("---|");
    }
    for _ in targets {
        md.push_str("---|");
    }
    md.push_str("---|\n");
    for row in rows {
        md.push_str(&format!("| {} |", row.label));
        if single {
            match row.source {
                Some(s) => md.push_str(&format!(" {} |", name_of(s))),
                None => md.push_str(" all |"),
            }
        }
        for &t in targets {
            let cell = row.cells.iter().find(|c| c.target == t);
            match cell {
                None => md.push_str(" – |"),
                Some(c) => {
                    let text = fmt_cell(c.mean, c.std, c.runs, decimals);
                    let is_best = match (c.mean, best_for_target(t)) {
                        (Some(m), Some(b)) => round_to(m, decimals) == b,
                        _ => false,
                    };
                    if is_best && rows.len() > 1 {
                        md.push_str(&format!(" **{text}** |"));
                    } else {
                        md.push_str(&format!(" {text} |"));
                    }
                }
            }
        }
        match row.average {
            None => md.push_str(" n/a |\n"),
            Some(a) => {
                let text = format!("{:.d$}", a, d = decimals);
                let is_best = best_avg.map_or(false, |b| round_to(a, decimals) == b);
                if is_best && rows.len() > 1 {
                    md.push_str(&format!(" **{text}** |\n"));
                } else {
                    md.push_str(&format!(" {text} |\n"));
                }
            }
        }
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SynthSpec};
    use crate::data::text::Vocabulary;
    use crate::trainer::EncoderMode;

    fn s(x: &str) -> String {
        x.to_string()
    }

    // ── Accuracy ────────────────────────────────────────────────────────────

    #[test]
    fn perfect_predictions_score_one_hundred() {
        let acc = accuracy_percent(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap();
        assert_eq!(acc, 100.0);
    }

    #[test]
    fn single_wrong_prediction_scores_zero() {
        assert_eq!(accuracy_percent(&[1], &[0]).unwrap(), 0.0);
    }

    #[test]
    fn empty_id_list_is_an_error() {
        assert!(accuracy_percent(&[], &[]).is_err());
    }

    fn fresh_state(ds: &MultiDomainDataset, cfg: &TrainConfig) -> ModelState {
        let vocab = Vocabulary::build(&ds.all_sentences(), 1);
        ModelState::new(cfg, vocab, ds.num_classes).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            lambda_align: 0.0,
            lambda_expl: 0.0,
            encoder_mode: EncoderMode::Erm,
            image_size: 16,
            conv_channels_1: 4,
            conv_channels_2: 6,
            feature_dim: 16,
            ..Default::default()
        }
    }

    #[test]
    fn untrained_on_balanced_four_classes_is_near_chance() {
        // An untrained model's argmax is arbitrary with respect to labels, so
        // accuracy on a balanced 4-class set behaves like a binomial with
        // p = 1/4; assert within 3σ of chance.
        let ds = generate(&SynthSpec {
            num_classes: 4,
            num_domains: 2,
            image_size: 16,
            samples_per_class_per_domain: 25,
            seed: 11,
        })
        .unwrap();
        let state = fresh_state(&ds, &small_cfg());
        let ids = ds.ids();
        let acc = evaluate_accuracy(&state, &ds, &ids, 0, 32).unwrap();
        let n = ids.len() as f64;
        let sigma = 100.0 * (0.25 * 0.75 / n).sqrt();
        assert!((acc - 25.0).abs() < 3.0 * sigma, "accuracy {acc} vs chance 25 ± {sigma}");
    }

    #[test]
    fn accuracy_is_permutation_invariant() {
        let ds = generate(&SynthSpec {
            num_classes: 3,
            num_domains: 2,
            image_size: 16,
            samples_per_class_per_domain: 6,
            seed: 5,
        })
        .unwrap();
        let state = fresh_state(&ds, &small_cfg());
        let ids = ds.ids();
        let mut reversed = ids.clone();
        reversed.reverse();
        let a = evaluate_accuracy(&state, &ds, &ids, 1, 7).unwrap();
        let b = evaluate_accuracy(&state, &ds, &reversed, 1, 7).unwrap();
        assert_eq!(a, b);
    }

    // ── Caption metrics ─────────────────────────────────────────────────────

    #[test]
    fn identical_corpora_score_exactly_one_hundred() {
        let hyps = vec![s("a red square on a plain background"), s("the small blue circle")];
        let refs: Vec<Vec<String>> = hyps.iter().map(|h| vec![h.clone()]).collect();
        assert_eq!(bleu4(&hyps, &refs).unwrap(), 100.0);
        assert_eq!(rouge_l(&hyps, &refs).unwrap(), 100.0);
    }

    #[test]
    fn short_hypothesis_has_no_high_order_grams() {
        // Two tokens give zero 3-gram and 4-gram candidates; without
        // smoothing the corpus score is 0 despite perfect 1/2-gram precision.
        let score = bleu4(&[s("the cat")], &[vec![s("the cat sat")]]).unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn four_gram_score_matches_hand_counted_precisions() {
        // hyp: "the cat sat on mat" (5 tokens) vs ref: "the cat sat on the
        // mat" (6 tokens). Hand counts: p1 = 5/5, p2 = 3/4, p3 = 2/3,
        // p4 = 1/2; brevity penalty exp(1 − 6/5).
        let score =
            bleu4(&[s("the cat sat on mat")], &[vec![s("the cat sat on the mat")]]).unwrap();
        let expected = 100.0
            * (1.0f64 - 6.0 / 5.0).exp()
            * ((0.75f64.ln() + (2.0 / 3.0f64).ln() + 0.5f64.ln()) / 4.0).exp();
        assert!((score - expected).abs() < 1e-9, "{score} vs {expected}");
    }

    #[test]
    fn clipping_uses_the_best_count_over_references() {
        // "a a b": the second reference licenses both copies of "a".
        let stats =
            pair_stats("a a b", &[s("a b"), s("a a")]).unwrap();
        assert_eq!(stats.matches[0], 3);
        assert_eq!(stats.totals[0], 3);
        // Against the single reference "a b" one copy of "a" is clipped off.
        let clipped = pair_stats("a a b", &[s("a b")]).unwrap();
        assert_eq!(clipped.matches[0], 2);
    }

    #[test]
    fn effective_reference_length_prefers_closest_then_shorter() {
        // hyp length 2; refs of lengths 1 and 3 tie on distance → shorter.
        let stats = pair_stats("a b", &[s("x"), s("x y z")]).unwrap();
        assert_eq!(stats.ref_len, 1);
    }

    #[test]
    fn empty_hypothesis_contributes_nothing() {
        let score = bleu4(
            &[s(""), s("a b c d e")],
            &[vec![s("a b")], vec![s("a b c d e")]],
        )
        .unwrap();
        // The empty hypothesis adds no candidates, so the second pair's
        // perfect precisions survive; its effective reference length still
        // counts toward the brevity penalty.
        assert!(score > 0.0 && score < 100.0);
    }

    #[test]
    fn mismatched_corpus_lengths_are_rejected() {
        assert!(bleu4(&[s("a")], &[]).is_err());
        assert!(rouge_l(&[s("a")], &[]).is_err());
    }

    #[test]
    fn lcs_f_measure_matches_hand_computation() {
        // "a b c" vs "a c": LCS 2, P = 2/3, R = 1, F = 0.8 → 80.
        let score = rouge_l(&[s("a b c")], &[vec![s("a c")]]).unwrap();
        assert!((score - 80.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_tokens_score_zero() {
        assert_eq!(rouge_l(&[s("a b")], &[vec![s("x y")]]).unwrap(), 0.0);
        assert_eq!(bleu4(&[s("a b")], &[vec![s("x y")]]).unwrap(), 0.0);
    }

    #[test]
    fn empty_corpora_score_zero() {
        assert_eq!(bleu4(&[], &[]).unwrap(), 0.0);
        assert_eq!(rouge_l(&[], &[]).unwrap(), 0.0);
    }

    #[test]
    fn multiple_references_take_the_best_match() {
        let score = rouge_l(&[s("a b")], &[vec![s("x y"), s("a b")]]).unwrap();
        assert_eq!(score, 100.0);
    }

    #[test]
    fn large_beta_weights_recall() {
        // "a b c d" vs "a b": P = 1/2, R = 1. β = 1 gives 2/3; larger β
        // pushes toward recall alone.
        let f1 = rouge_l_with_beta(&[s("a b c d")], &[vec![s("a b")]], 1.0).unwrap();
        assert!((f1 - 200.0 / 3.0).abs() < 1e-9);
        let f8 = rouge_l_with_beta(&[s("a b c d")], &[vec![s("a b")]], 8.0).unwrap();
        assert!(f8 > 95.0 && f8 < 100.0);
    }

    #[test]
    fn scores_stay_in_range() {
        let hyps = vec![s("red square"), s("blue circle with stripes"), s("")];
        let refs = vec![
            vec![s("a red square")],
            vec![s("the blue circle"), s("blue circle with dots")],
            vec![s("green triangle")],
        ];
        let cs = caption_scores(&hyps, &refs).unwrap();
        assert!((0.0..=100.0).contains(&cs.bleu4));
        assert!((0.0..=100.0).contains(&cs.rouge_l));
    }

    // ── Diagnostics ─────────────────────────────────────────────────────────

    #[test]
    fn alignment_ratio_matches_hand_geometry() {
        // Three same-class points: two in domain 0 at distance 3, one in
        // domain 1 at distances 4 and 5 → ratio (4+5)/2 / 3 = 1.5.
        let vectors = [0.0, 0.0, 3.0, 0.0, 0.0, 4.0];
        let r = alignment_ratio(&vectors, 2, &[0, 0, 0], &[0, 0, 1]).unwrap();
        assert!((r - 1.5).abs() < 1e-12);
    }

    #[test]
    fn alignment_ratio_requires_both_pair_kinds() {
        // Two points in one domain: no cross-domain pair.
        let vectors = [0.0, 0.0, 1.0, 0.0];
        assert!(alignment_ratio(&vectors, 2, &[0, 0], &[0, 0]).is_err());
    }

    #[test]
    fn covariance_trace_matches_hand_computation() {
        // Rows (0,0) and (2,0): variance 1 in the first dimension only.
        let trace = covariance_trace(&[0.0, 0.0, 2.0, 0.0], 2).unwrap();
        assert!((trace - 1.0).abs() < 1e-12);
        // Identical rows collapse to zero.
        let zero = covariance_trace(&[1.0, 2.0, 1.0, 2.0], 2).unwrap();
        assert_eq!(zero, 0.0);
    }

    // ── Embedding export ────────────────────────────────────────────────────

    #[test]
    fn export_writes_one_row_per_id_with_joint_width() {
        let ds = generate(&SynthSpec {
            num_classes: 2,
            num_domains: 2,
            image_size: 16,
            samples_per_class_per_domain: 4,
            seed: 2,
        })
        .unwrap();
        let cfg = TrainConfig {
            image_size: 16,
            conv_channels_1: 4,
            conv_channels_2: 6,
            feature_dim: 16,
            d_joint: 8,
            d_text: 32,
            gen_embed_dim: 6,
            gen_hidden: 8,
            ..Default::default()
        };
        let state = fresh_state(&ds, &cfg);
        let ids = ds.ids();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.tsv");
        export_embeddings(&state, &ds, &[(0, &ids), (1, &ids)], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * ids.len());
        for line in &lines {
            assert_eq!(line.split('\t').count(), 3 + 8);
        }
        // Re-export is byte-identical.
        let path2 = dir.path().join("again.tsv");
        export_embeddings(&state, &ds, &[(0, &ids), (1, &ids)], &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn export_without_projections_is_rejected() {
        let ds = generate(&SynthSpec {
            num_classes: 2,
            num_domains: 2,
            image_size: 16,
            samples_per_class_per_domain: 3,
            seed: 3,
        })
        .unwrap();
        let state = fresh_state(&ds, &small_cfg());
        let ids = ds.ids();
        let dir = tempfile::tempdir().unwrap();
        let err = export_embeddings(&state, &ds, &[(0, &ids)], &dir.path().join("e.tsv"));
        assert!(err.is_err());
    }

    // ── Protocol runners ────────────────────────────────────────────────────

    fn protocol_cfg(train: TrainConfig) -> ProtocolConfig {
        ProtocolConfig {
            train,
            val_fraction: 0.25,
            test_fraction: 0.25,
            split_seed: 0,
            eval_batch: 32,
        }
    }

    fn rotation_dataset() -> MultiDomainDataset {
        generate(&SynthSpec {
            num_classes: 2,
            num_domains: 2,
            image_size: 16,
            samples_per_class_per_domain: 10,
            seed: 9,
        })
        .unwrap()
    }

    fn quick_train() -> TrainConfig {
        TrainConfig {
            steps: 2,
            batch_per_domain: 4,
            eval_interval: 2,
            ..small_cfg()
        }
    }

    #[test]
    fn two_domain_rotation_fills_every_cell_per_seed() {
        let ds = rotation_dataset();
        let table = run_multi_source(&ds, &protocol_cfg(quick_train()), &[0, 1]).unwrap();
        assert_eq!(table.protocol, SplitMode::MultiSource);
        assert_eq!(table.cells.len(), 2);
        for cell in &table.cells {
            assert_eq!(cell.seed_accuracies.len(), 2, "one accuracy per seed");
            assert!(cell.failures.is_empty());
            for sa in &cell.seed_accuracies {
                assert!((0.0..=100.0).contains(&sa.accuracy));
            }
            let mean = cell.mean().unwrap();
            let by_hand = cell.seed_accuracies.iter().map(|s| s.accuracy).sum::<f64>() / 2.0;
            assert_eq!(mean, by_hand);
        }
        assert!(table.overall_average().is_some());
    }

    #[test]
    fn single_source_matrix_skips_the_diagonal() {
        let ds = rotation_dataset();
        let table = run_single_source(&ds, &protocol_cfg(quick_train()), &[0]).unwrap();
        assert_eq!(table.protocol, SplitMode::SingleSource);
        // 2 domains → 2 off-diagonal cells.
        assert_eq!(table.cells.len(), 2);
        for cell in &table.cells {
            let source = cell.source.expect("matrix cells carry their source");
            assert_ne!(source, cell.target);
            assert_eq!(cell.seed_accuracies.len(), 1);
        }
    }

    #[test]
    fn training_failures_become_cell_markers_not_crashes() {
        let ds = rotation_dataset();
        let mut bad = quick_train();
        bad.image_size = 8; // disagrees with the rendered dataset
        let table = run_multi_source(&ds, &protocol_cfg(bad), &[0, 1]).unwrap();
        for cell in &table.cells {
            assert!(cell.seed_accuracies.is_empty());
            assert_eq!(cell.failures.len(), 2);
            assert!(cell.failures[0].reason.contains("image_size"));
            assert!(cell.mean().is_none());
        }
        assert!(table.overall_average().is_none());
    }

    #[test]
    fn results_table_round_trips_through_disk() {
        let ds = rotation_dataset();
        let table = run_multi_source(&ds, &protocol_cfg(quick_train()), &[3]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.json");
        table.save(&path).unwrap();
        let back = ResultsTable::load(&path).unwrap();
        assert_eq!(back.cells.len(), table.cells.len());
        assert_eq!(back.cells[0].seed_accuracies[0].seed, 3);
        assert_eq!(
            back.cells[0].seed_accuracies[0].accuracy,
            table.cells[0].seed_accuracies[0].accuracy
        );
    }

    // ── Reports ─────────────────────────────────────────────────────────────

    fn fake_run_dir(
        root: &Path,
        name: &str,
        config: serde_json::Value,
        accs: &[f64],
    ) -> PathBuf {
        let dir = root.join(name);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("config.json"), serde_json::to_string(&config).unwrap()).unwrap();
        let table = ResultsTable {
            protocol: SplitMode::MultiSource,
            num_domains: 2,
            domain_names: vec!["plain".into(), "brush".into()],
            cells: vec![Cell {
                source: None,
                target: 1,
                seed_accuracies: accs
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| SeedAccuracy { seed: i as u64, accuracy: a })
                    .collect(),
                failures: Vec::new(),
            }],
        };
        table.save(&dir.join("results.json")).unwrap();
        dir
    }

    #[test]
    fn three_run_cell_renders_mean_and_population_std() {
        let root = tempfile::tempdir().unwrap();
        let gvrt = fake_run_dir(
            root.path(),
            "a",
            serde_json::json!({"encoder_mode": "pte", "lambda_align": 1.0, "lambda_expl": 1.0}),
            &[62.5, 62.3, 62.7],
        );
        let erm = fake_run_dir(
            root.path(),
            "b",
            serde_json::json!({"encoder_mode": "erm", "lambda_align": 0.0, "lambda_expl": 0.0}),
            &[60.0],
        );
        let report = aggregate_report(&[gvrt, erm]).unwrap();
        // Population std of [62.5, 62.3, 62.7] is 0.163…, rendered at one
        // decimal as 0.2; the best column value is bold.
        assert!(report.markdown.contains("**62.5 ± 0.2**"), "{}", report.markdown);
        // Single-run cell renders without a spread.
        assert!(report.markdown.contains("| 60.0 |"), "{}", report.markdown);
        assert!(!report.markdown.contains("60.0 ±"));
        // Column header uses the domain name.
        assert!(report.markdown.contains("brush"));
        // Machine summary agrees.
        let row = report.summary.rows.iter().find(|r| r.label == "gvrt-pte").unwrap();
        assert!((row.cells[0].mean.unwrap() - 62.5).abs() < 1e-12);
        assert_eq!(row.cells[0].runs, 3);
        assert_eq!(report.summary.std_kind, "population");
    }

    #[test]
    fn mixed_protocols_are_rejected() {
        let root = tempfile::tempdir().unwrap();
        let a = fake_run_dir(
            root.path(),
            "a",
            serde_json::json!({"encoder_mode": "pte"}),
            &[50.0],
        );
        let b_dir = root.path().join("b");
        fs::create_dir_all(&b_dir).unwrap();
        fs::write(b_dir.join("config.json"), "{}").unwrap();
        let table = ResultsTable {
            protocol: SplitMode::SingleSource,
            num_domains: 2,
            domain_names: vec!["plain".into(), "brush".into()],
            cells: vec![Cell {
                source: Some(0),
                target: 1,
                seed_accuracies: vec![SeedAccuracy { seed: 0, accuracy: 40.0 }],
                failures: Vec::new(),
            }],
        };
        table.save(&b_dir.join("results.json")).unwrap();
        assert!(aggregate_report(&[a, b_dir]).is_err());
    }

    #[test]
    fn pooling_merges_same_label_runs() {
        let root = tempfile::tempdir().unwrap();
        let cfg = serde_json::json!({"encoder_mode": "pte", "lambda_align": 1.0, "lambda_expl": 1.0});
        let a = fake_run_dir(root.path(), "a", cfg.clone(), &[60.0]);
        let b = fake_run_dir(root.path(), "b", cfg, &[62.0]);
        let report = aggregate_report(&[a, b]).unwrap();
        assert_eq!(report.summary.rows.len(), 1);
        let row = &report.summary.rows[0];
        assert_eq!(row.cells[0].runs, 2);
        assert!((row.cells[0].mean.unwrap() - 61.0).abs() < 1e-12);
    }
}
