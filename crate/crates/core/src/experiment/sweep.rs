// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    prepare, read_json, subject_subsets, write_csv, write_json, write_summary, write_text, ExperimentConfig,
    Prepared,
};
use crate::dpselect::{self, Metric, SelectionConfig, SelectionOutcome, SelectionRule, SimilarityScore};
use crate::encoder::ParamSet;
use crate::error::{Error, Result};
use crate::fedcore::{self, Algorithm, FedClient};
use crate::synthdata::ClientDataset;

/// Single (host only) or one of the federated algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Method {
    Single,
    Fed(Algorithm),
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Single => f.write_str("Single"),
            Method::Fed(a) => f.write_str(a.name()),
        }
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        if s == "Single" {
            Ok(Method::Single)
        } else {
            Ok(Method::Fed(s.parse()?))
        }
    }
}

/// One sweep cell: (seed, host, method, participating subjects).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub seed: u64,
    pub host: String,
    pub method: Method,
    /// Subjects in configuration order; empty for Single.
    pub subjects: Vec<String>,
}

impl CellKey {
    pub fn single(seed: u64, host: &str) -> Self {
        Self {
            seed,
            host: host.to_owned(),
            method: Method::Single,
            subjects: Vec::new(),
        }
    }

    pub fn fed(seed: u64, host: &str, algorithm: Algorithm, subjects: Vec<String>) -> Self {
        Self {
            seed,
            host: host.to_owned(),
            method: Method::Fed(algorithm),
            subjects,
        }
    }

    /// Participants including the host.
    pub fn size(&self) -> usize {
        1 + self.subjects.len()
    }

    pub fn participants(&self) -> Vec<String> {
        std::iter::once(self.host.clone()).chain(self.subjects.iter().cloned()).collect()
    }

    pub fn subset_label(&self) -> String {
        if self.subjects.is_empty() {
            "-".to_owned()
        } else {
            self.subjects.join("+")
        }
    }

    pub fn file_stem(&self) -> String {
        format!("seed{}_{}_{}_{}", self.seed, self.host, self.method, self.subset_label())
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "seed {} {} {} [{}]", self.seed, self.host, self.method, self.subset_label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    /// Host test macro AUROC of the best checkpoint.
    pub test_macro_auroc: f64,
    pub val_macro_auroc: f64,
    pub best_round: usize,
    pub rounds_run: usize,
    /// Checksum of the best checkpoint's host parameters.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub client_id: String,
    pub score: f64,
    pub sigma: f64,
    pub m: usize,
}

/// Similarity of every candidate to the host for one seed and metric,
/// computed with that seed's Single model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub seed: u64,
    pub host: String,
    pub metric: Metric,
    pub candidates: Vec<CandidateScore>,
}

impl SelectionRecord {
    pub fn scores(&self) -> Vec<(String, SimilarityScore)> {
        self.candidates
            .iter()
            .map(|c| {
                let s = SimilarityScore {
                    metric: self.metric,
                    value: c.score,
                    higher_is_more_similar: self.metric.higher_is_more_similar(),
                };
                (c.client_id.clone(), s)
            })
            .collect()
    }

    /// Selected subjects in configuration order.
    pub fn selected(&self, rule: SelectionRule, order: &[String]) -> Result<Vec<String>> {
        let chosen = dpselect::select(&self.scores(), rule)?;
        Ok(order.iter().filter(|id| chosen.contains(id)).cloned().collect())
    }

    pub fn score_of(&self, client_id: &str) -> Option<f64> {
        self.candidates.iter().find(|c| c.client_id == client_id).map(|c| c.score)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutput {
    pub cells: BTreeMap<CellKey, CellResult>,
    pub selection: Vec<SelectionRecord>,
    /// Cells that failed, with the error; their table entries stay empty.
    pub failed: Vec<(CellKey, String)>,
}

impl SweepOutput {
    pub fn get(&self, key: &CellKey) -> Option<&CellResult> {
        self.cells.get(key)
    }

    pub fn record(&self, seed: u64, metric: Metric) -> Option<&SelectionRecord> {
        self.selection.iter().find(|r| r.seed == seed && r.metric == metric)
    }
}

/// Every cell of the grid: per seed, Single plus each subject subset under
/// each algorithm.
pub fn enumerate_cells(cfg: &ExperimentConfig) -> Vec<CellKey> {
    let subsets = subject_subsets(&cfg.subjects());
    let mut keys = Vec::new();
    for &seed in &cfg.seeds {
        keys.push(CellKey::single(seed, &cfg.host));
        for s in &subsets {
            for &a in &cfg.algorithms {
                keys.push(CellKey::fed(seed, &cfg.host, a, s.clone()));
            }
        }
    }
    keys
}

fn checkpoint_path(out: &Path, key: &CellKey) -> PathBuf {
    out.join("checkpoints").join(format!("{}.json", key.file_stem()))
}

fn run_cell(cfg: &ExperimentConfig, prep: &Prepared, key: &CellKey, out: &Path) -> Result<(CellResult, ParamSet)> {
    let host = prep.client(&key.host)?;
    let outcome = match key.method {
        Method::Single => fedcore::train_single(&prep.model, host, &cfg.run_config(Algorithm::FedAvg, vec![key.host.clone()], key.seed))?,
        Method::Fed(a) => fedcore::run_federation(&prep.model, &cfg.run_config(a, key.participants(), key.seed), &prep.clients)?,
    };
    let params = outcome.best_host_params().clone();
    let test = fedcore::evaluate(&prep.model, &params, &host.test)?.macro_auroc;

    let log_path = out.join("rounds").join(format!("{}.jsonl", key.file_stem()));
    fs::create_dir_all(log_path.parent().expect("has parent")).map_err(|e| Error::io(&log_path, e))?;
    if log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    fedcore::write_round_logs(&log_path, &outcome.logs)?;
    if key.method == Method::Single || cfg.save_checkpoints {
        let path = checkpoint_path(out, key);
        fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(&path, e))?;
        params.save(&path)?;
    }
    let result = CellResult {
        key: key.clone(),
        test_macro_auroc: test,
        val_macro_auroc: outcome.best_val_macro_auroc,
        best_round: outcome.best_round,
        rounds_run: outcome.rounds_run(),
        checksum: params.checksum(),
    };
    Ok((result, params))
}

const CELL_CACHE: &str = "cells.jsonl";
const CONFIG_COPY: &str = "sweep_config.json";

fn read_cache(path: &Path) -> Result<BTreeMap<CellKey, CellResult>> {
    let mut cache = BTreeMap::new();
    let Ok(file) = fs::File::open(path) else {
        return Ok(cache);
    };
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        // A run killed mid-write can leave a truncated last line.
        if let Ok(r) = serde_json::from_str::<CellResult>(&line) {
            cache.insert(r.key.clone(), r);
        }
    }
    Ok(cache)
}

struct CacheWriter {
    path: PathBuf,
    file: Mutex<fs::File>,
}

impl CacheWriter {
    fn open(path: PathBuf) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    fn append(&self, r: &CellResult) -> Result<()> {
        let mut line = serde_json::to_string(r).map_err(|e| Error::json(&self.path, e))?;
        line.push('\n');
        let mut f = self.file.lock().expect("cache lock");
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs every missing cell of the grid and writes the sweep reports.
///
/// Finished cells are cached in `out/cells.jsonl`, so an interrupted sweep
/// resumes where it stopped. Reusing `out` for a different configuration is
/// rejected.
pub fn run_sweep(cfg: &ExperimentConfig, datasets: &[ClientDataset], out: &Path) -> Result<SweepOutput> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_copy = out.join(CONFIG_COPY);
    let fingerprint = cfg.fingerprint();
    match fs::read_to_string(&config_copy) {
        Ok(existing) if existing.trim_end() != fingerprint => {
            return Err(Error::Config(format!("{} holds results of a different configuration", out.display())));
        }
        Ok(_) => {}
        Err(_) => write_text(&config_copy, &format!("{fingerprint}\n"))?,
    }

    let cache_path = out.join(CELL_CACHE);
    let mut done = read_cache(&cache_path)?;
    let writer = CacheWriter::open(cache_path)?;
    let keys = enumerate_cells(cfg);
    done.retain(|k, _| keys.contains(k));

    let prepared: Vec<Prepared> = cfg
        .execution
        .map(&cfg.seeds, |&seed| prepare(cfg, datasets, seed))
        .into_iter()
        .collect::<Result<_>>()?;
    let prep_for = |seed: u64| prepared.iter().find(|p| p.seed == seed).expect("prepared every seed");

    // Single runs first: the selection model is each seed's Single checkpoint.
    let singles: Vec<CellKey> = cfg.seeds.iter().map(|&s| CellKey::single(s, &cfg.host)).collect();
    let single_params = cfg.execution.map(&singles, |key| -> Result<(CellResult, ParamSet)> {
        let path = checkpoint_path(out, key);
        if let (Some(r), true) = (done.get(key), path.exists()) {
            let params = ParamSet::load(&path)?;
            if params.checksum() == r.checksum {
                return Ok((r.clone(), params));
            }
        }
        cfg.log(format!("running {key}"));
        let (r, p) = run_cell(cfg, prep_for(key.seed), key, out)?;
        writer.append(&r)?;
        Ok((r, p))
    });
    let mut single_models = BTreeMap::new();
    for (key, res) in singles.iter().zip(single_params) {
        let (r, p) = res?;
        done.insert(key.clone(), r);
        single_models.insert(key.seed, p);
    }

    let mut selection = Vec::new();
    for &seed in &cfg.seeds {
        let prep = prep_for(seed);
        let host = prep.client(&cfg.host)?;
        let candidates: Vec<FedClient> = prep.clients.iter().filter(|c| c.id != cfg.host).cloned().collect();
        for &metric in &cfg.metrics {
            let sel_cfg = SelectionConfig {
                metric,
                rule: SelectionRule::TopK(1),
                dp: cfg.dp,
                seed,
            };
            let outcome = dpselect::run_selection_with_model(&prep.model, &single_models[&seed], host, &candidates, &sel_cfg, cfg.execution)?;
            selection.push(SelectionRecord {
                seed,
                host: cfg.host.clone(),
                metric,
                candidates: outcome
                    .candidates
                    .iter()
                    .map(|c| CandidateScore {
                        client_id: c.client_id.clone(),
                        score: c.score,
                        sigma: c.sigma,
                        m: c.m,
                    })
                    .collect(),
            });
        }
    }

    let todo: Vec<CellKey> = keys.iter().filter(|k| !done.contains_key(*k)).cloned().collect();
    cfg.log(format!("{} of {} cells cached, {} to run", keys.len() - todo.len(), keys.len(), todo.len()));
    let ran = cfg.execution.map(&todo, |key| {
        let started = std::time::Instant::now();
        let res = run_cell(cfg, prep_for(key.seed), key, out).and_then(|(r, _)| {
            writer.append(&r)?;
            Ok(r)
        });
        match &res {
            Ok(r) => cfg.log(format!(
                "{key}: test {:.4} after {} rounds in {:.1}s",
                r.test_macro_auroc,
                r.rounds_run,
                started.elapsed().as_secs_f64()
            )),
            Err(e) => cfg.log(format!("{key}: failed: {e}")),
        }
        res
    });
    let mut failed = Vec::new();
    for (key, res) in todo.into_iter().zip(ran) {
        match res {
            Ok(r) => {
                done.insert(key, r);
            }
            Err(e) => failed.push((key, e.to_string())),
        }
    }

    let output = SweepOutput {
        cells: done,
        selection,
        failed,
    };
    write_sweep_reports(cfg, &output, out)?;
    Ok(output)
}

#[derive(Serialize, Deserialize)]
struct SweepFile {
    cells: Vec<CellResult>,
    failed: Vec<FailedCell>,
}

#[derive(Serialize, Deserialize)]
struct FailedCell {
    key: CellKey,
    error: String,
}

#[derive(Serialize)]
struct SweepRow<'a> {
    seed: u64,
    host: &'a str,
    method: String,
    clients: usize,
    subjects: String,
    test_macro_auroc: f64,
    val_macro_auroc: f64,
    best_round: usize,
    rounds_run: usize,
    checksum: &'a str,
}

/// Average and Best over all subject subsets of one size.
#[derive(Debug, Clone, Serialize)]
struct Table1Row {
    seed: String,
    method: String,
    clients: usize,
    subsets: usize,
    expected_subsets: usize,
    average: Option<f64>,
    best: Option<f64>,
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn table1_rows(cfg: &ExperimentConfig, sweep: &SweepOutput) -> Vec<Table1Row> {
    let n_subjects = cfg.subjects().len();
    let mut rows = Vec::new();
    let mut methods = vec![Method::Single];
    methods.extend(cfg.algorithms.iter().map(|&a| Method::Fed(a)));
    for &seed in &cfg.seeds {
        for &method in &methods {
            let sizes: Vec<usize> = if method == Method::Single { vec![1] } else { (2..=n_subjects + 1).collect() };
            for size in sizes {
                let values: Vec<f64> = sweep
                    .cells
                    .values()
                    .filter(|r| r.key.seed == seed && r.key.method == method && r.key.size() == size)
                    .map(|r| r.test_macro_auroc)
                    .collect();
                rows.push(Table1Row {
                    seed: seed.to_string(),
                    method: method.to_string(),
                    clients: size,
                    subsets: values.len(),
                    expected_subsets: binomial(n_subjects, size - 1),
                    average: mean(&values),
                    best: values.iter().copied().reduce(f64::max),
                });
            }
        }
    }
    // Seed means of the per-seed Average and Best.
    let per_seed = rows.clone();
    for &method in &methods {
        let sizes: Vec<usize> = if method == Method::Single { vec![1] } else { (2..=n_subjects + 1).collect() };
        for size in sizes {
            let sel: Vec<&Table1Row> = per_seed
                .iter()
                .filter(|r| r.method == method.to_string() && r.clients == size)
                .collect();
            let avgs: Vec<f64> = sel.iter().filter_map(|r| r.average).collect();
            let bests: Vec<f64> = sel.iter().filter_map(|r| r.best).collect();
            rows.push(Table1Row {
                seed: "mean".into(),
                method: method.to_string(),
                clients: size,
                subsets: sel.iter().map(|r| r.subsets).sum(),
                expected_subsets: sel.iter().map(|r| r.expected_subsets).sum(),
                average: (avgs.len() == sel.len()).then(|| mean(&avgs)).flatten(),
                best: (bests.len() == sel.len()).then(|| mean(&bests)).flatten(),
            });
        }
    }
    rows
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "   -  ".to_owned(), |x| format!("{x:.4}"))
}

fn write_sweep_reports(cfg: &ExperimentConfig, sweep: &SweepOutput, out: &Path) -> Result<()> {
    let file = SweepFile {
        cells: sweep.cells.values().cloned().collect(),
        failed: sweep
            .failed
            .iter()
            .map(|(key, error)| FailedCell {
                key: key.clone(),
                error: error.clone(),
            })
            .collect(),
    };
    write_json(&out.join("sweep.json"), &file)?;
    write_json(&out.join("selection.json"), &sweep.selection)?;
    let rows: Vec<SweepRow> = sweep
        .cells
        .values()
        .map(|r| SweepRow {
            seed: r.key.seed,
            host: &r.key.host,
            method: r.key.method.to_string(),
            clients: r.key.size(),
            subjects: r.key.subset_label(),
            test_macro_auroc: r.test_macro_auroc,
            val_macro_auroc: r.val_macro_auroc,
            best_round: r.best_round,
            rounds_run: r.rounds_run,
            checksum: &r.checksum,
        })
        .collect();
    write_csv(&out.join("sweep.csv"), &rows)?;
    let table = table1_rows(cfg, sweep);
    write_csv(&out.join("table1.csv"), &table)?;

    let mut text = String::new();
    let _ = writeln!(text, "Host {} test macro AUROC, Average / Best over subject subsets (mean over seeds)", cfg.host);
    let _ = writeln!(text, "{:<8} {:>7} {:>8} {:>8}", "method", "clients", "average", "best");
    for r in table.iter().filter(|r| r.seed == "mean") {
        let _ = writeln!(text, "{:<8} {:>7} {:>8} {:>8}", r.method, r.clients, fmt_opt(r.average), fmt_opt(r.best));
    }
    if !sweep.failed.is_empty() {
        let _ = writeln!(text, "\n{} cells failed:", sweep.failed.len());
        for (k, e) in &sweep.failed {
            let _ = writeln!(text, "  {k}: {e}");
        }
    }
    write_summary(&out.join("table1.txt"), &text)
}

/// Loads the results written by [`run_sweep`].
pub fn read_sweep(out: &Path) -> Result<SweepOutput> {
    let file: SweepFile = read_json(&out.join("sweep.json"))?;
    let selection: Vec<SelectionRecord> = read_json(&out.join("selection.json"))?;
    Ok(SweepOutput {
        cells: file.cells.into_iter().map(|r| (r.key.clone(), r)).collect(),
        selection,
        failed: file.failed.into_iter().map(|f| (f.key, f.error)).collect(),
    })
}

/// The standalone selection protocol for one seed: trains the host's
/// Single model, scores every candidate and writes the per-candidate report
/// to `out/selection_report.json`.
pub fn cmd_select(cfg: &ExperimentConfig, datasets: &[ClientDataset], out: &Path, metric: Metric, rule: SelectionRule, seed: u64) -> Result<SelectionOutcome> {
    cfg.validate()?;
    let prep = prepare(cfg, datasets, seed)?;
    let host = prep.client(&cfg.host)?;
    let candidates: Vec<FedClient> = prep.clients.iter().filter(|c| c.id != cfg.host).cloned().collect();
    let sel_cfg = SelectionConfig {
        metric,
        rule,
        dp: cfg.dp,
        seed,
    };
    let train_cfg = cfg.run_config(Algorithm::FedAvg, vec![cfg.host.clone()], seed);
    let (outcome, weights) = dpselect::run_selection_protocol(&prep.model, host, &candidates, &sel_cfg, &train_cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("selection_report.json"), &outcome.candidates)?;
    weights.save(&out.join(format!("selection_model_seed{seed}.json")))?;
    Ok(outcome)
}
