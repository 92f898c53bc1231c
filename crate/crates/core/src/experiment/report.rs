// SPDX-License-Identifier: Apache-2.0

//! Similarity-versus-benefit correlations and selection evaluation, both
//! computed from a finished sweep.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sweep::{CellKey, Method, SweepOutput};
use super::{write_csv, write_json, write_summary, ExperimentConfig};
use crate::dpselect::{Metric, SelectionRule};
use crate::error::{Error, Result};
use crate::fedcore::Algorithm;
use crate::metrics;

/// Host test macro AUROC with `subject` minus without it. `without` must be
/// `with` minus that subject, for the same seed and host; a one-subject
/// federation pairs with the Single run.
pub fn performance_delta(sweep: &SweepOutput, with: &CellKey, without: &CellKey, subject: &str) -> Result<f64> {
    if subject == with.host {
        return Err(Error::Config("the host cannot be its own subject".into()));
    }
    if with.seed != without.seed || with.host != without.host {
        return Err(Error::Config(format!("runs {with} and {without} differ in seed or host")));
    }
    let Method::Fed(_) = with.method else {
        return Err(Error::Config(format!("{with} has no subjects")));
    };
    let method_ok = without.method == with.method || (without.method == Method::Single && without.subjects.is_empty());
    let expected: Vec<&String> = with.subjects.iter().filter(|s| *s != subject).collect();
    if !method_ok || !with.subjects.iter().any(|s| s == subject) || without.subjects.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Config(format!("{with} and {without} are not paired on {subject:?}")));
    }
    let get = |k: &CellKey| {
        sweep
            .get(k)
            .map(|r| r.test_macro_auroc)
            .ok_or_else(|| Error::InvalidInput(format!("missing run {k}")))
    };
    Ok(get(with)? - get(without)?)
}

/// One (similarity, benefit) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaPair {
    pub seed: u64,
    pub metric: Metric,
    pub algorithm: Algorithm,
    pub subject: String,
    /// Participants in the federation that includes the subject.
    pub clients: usize,
    pub others: Vec<String>,
    pub score: f64,
    pub delta: f64,
}

fn delta_pairs(cfg: &ExperimentConfig, sweep: &SweepOutput, seed: u64, metric: Metric, algorithm: Algorithm) -> Result<Vec<DeltaPair>> {
    let record = sweep
        .record(seed, metric)
        .ok_or_else(|| Error::InvalidInput(format!("no {metric} scores for seed {seed}")))?;
    let mut pairs = Vec::new();
    for with in sweep.cells.keys().filter(|k| k.seed == seed && k.host == cfg.host && k.method == Method::Fed(algorithm)) {
        for subject in &with.subjects {
            let others: Vec<String> = with.subjects.iter().filter(|s| *s != subject).cloned().collect();
            let without = if others.is_empty() {
                CellKey::single(seed, &cfg.host)
            } else {
                CellKey::fed(seed, &cfg.host, algorithm, others.clone())
            };
            if sweep.get(&without).is_none() {
                continue;
            }
            let score = record
                .score_of(subject)
                .ok_or_else(|| Error::InvalidInput(format!("no score for {subject}")))?;
            pairs.push(DeltaPair {
                seed,
                metric,
                algorithm,
                subject: subject.clone(),
                clients: with.size(),
                others,
                score,
                delta: performance_delta(sweep, with, &without, subject)?,
            });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    pub spearman: Option<f64>,
    pub kendall: Option<f64>,
    pub pairs: usize,
}

impl CorrelationCell {
    fn of(pairs: &[&DeltaPair]) -> Self {
        let xs: Vec<f64> = pairs.iter().map(|p| p.score).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.delta).collect();
        Self {
            spearman: metrics::spearman(&xs, &ys).ok(),
            kendall: metrics::kendall(&xs, &ys).ok(),
            pairs: pairs.len(),
        }
    }

    /// Mean over cells, ignoring undefined entries.
    fn average(cells: &[CorrelationCell]) -> Self {
        let avg = |f: fn(&CorrelationCell) -> Option<f64>| {
            let v: Vec<f64> = cells.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            spearman: avg(|c| c.spearman),
            kendall: avg(|c| c.kendall),
            pairs: cells.iter().map(|c| c.pairs).sum(),
        }
    }
}

/// Correlations for one seed (or the seed mean) and metric, by federation
/// size and overall. `algorithm` is `None` for the algorithm average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub seed: Option<u64>,
    pub metric: Metric,
    pub algorithm: Option<Algorithm>,
    pub by_size: Vec<(usize, CorrelationCell)>,
    pub overall: CorrelationCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rows: Vec<CorrelationRow>,
    pub pairs: Vec<DeltaPair>,
}

impl CorrelationReport {
    pub fn averaged(&self, seed: Option<u64>, metric: Metric) -> Option<&CorrelationRow> {
        self.rows
            .iter()
            .find(|r| r.seed == seed && r.metric == metric && r.algorithm.is_none())
    }
}

/// Spearman and Kendall correlation between each subject's similarity to
/// the host and the change in host test AUROC when it joins, per algorithm
/// and averaged over algorithms. "Overall" pools every size.
pub fn correlate(cfg: &ExperimentConfig, sweep: &SweepOutput) -> Result<CorrelationReport> {
    let sizes: Vec<usize> = (2..=cfg.subjects().len() + 1).collect();
    let mut rows = Vec::new();
    let mut all_pairs = Vec::new();
    for &seed in &cfg.seeds {
        for &metric in &cfg.metrics {
            let mut per_algorithm = Vec::new();
            for &algorithm in &cfg.algorithms {
                let pairs = delta_pairs(cfg, sweep, seed, metric, algorithm)?;
                let by_size = sizes
                    .iter()
                    .map(|&n| {
                        let sel: Vec<&DeltaPair> = pairs.iter().filter(|p| p.clients == n).collect();
                        (n, CorrelationCell::of(&sel))
                    })
                    .collect();
                let row = CorrelationRow {
                    seed: Some(seed),
                    metric,
                    algorithm: Some(algorithm),
                    by_size,
                    overall: CorrelationCell::of(&pairs.iter().collect::<Vec<_>>()),
                };
                all_pairs.extend(pairs);
                per_algorithm.push(row);
            }
            rows.push(average_rows(Some(seed), metric, None, &per_algorithm, &sizes));
            rows.extend(per_algorithm);
        }
    }
    for &metric in &cfg.metrics {
        let seeds: Vec<CorrelationRow> = rows
            .iter()
            .filter(|r| r.metric == metric && r.algorithm.is_none() && r.seed.is_some())
            .cloned()
            .collect();
        rows.push(average_rows(None, metric, None, &seeds, &sizes));
    }
    if rows.iter().all(|r| r.overall.spearman.is_none()) {
        return Err(Error::InvalidInput("not enough paired runs for any correlation".into()));
    }
    Ok(CorrelationReport { rows, pairs: all_pairs })
}

fn average_rows(seed: Option<u64>, metric: Metric, algorithm: Option<Algorithm>, rows: &[CorrelationRow], sizes: &[usize]) -> CorrelationRow {
    let by_size = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| (n, CorrelationCell::average(&rows.iter().map(|r| r.by_size[i].1).collect::<Vec<_>>())))
        .collect();
    CorrelationRow {
        seed,
        metric,
        algorithm,
        by_size,
        overall: CorrelationCell::average(&rows.iter().map(|r| r.overall).collect::<Vec<_>>()),
    }
}

#[derive(Serialize)]
struct CorrelationCsvRow {
    seed: String,
    metric: Metric,
    algorithm: String,
    statistic: &'static str,
    clients: String,
    value: Option<f64>,
    pairs: usize,
}

fn seed_label(seed: Option<u64>) -> String {
    seed.map_or_else(|| "mean".to_owned(), |s| s.to_string())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "    -  ".to_owned(), |x| format!("{x:>7.3}"))
}

/// Writes `correlation.json`, `table2.csv` and `table2.txt`.
pub fn write_correlation(report: &CorrelationReport, out: &Path) -> Result<()> {
    write_json(&out.join("correlation.json"), report)?;
    let mut csv = Vec::new();
    for r in &report.rows {
        let algorithm = r.algorithm.map_or_else(|| "average".to_owned(), |a| a.to_string());
        let cells = r
            .by_size
            .iter()
            .map(|(n, c)| (n.to_string(), *c))
            .chain(std::iter::once(("overall".to_owned(), r.overall)));
        for (clients, c) in cells {
            for (statistic, value) in [("spearman", c.spearman), ("kendall", c.kendall)] {
                csv.push(CorrelationCsvRow {
                    seed: seed_label(r.seed),
                    metric: r.metric,
                    algorithm: algorithm.clone(),
                    statistic,
                    clients: clients.clone(),
                    value,
                    pairs: c.pairs,
                });
            }
        }
    }
    write_csv(&out.join("table2.csv"), &csv)?;

    let mut text = String::from("Similarity vs change in host test AUROC, averaged over algorithms\n");
    // Seeds ascending, then the seed mean.
    let mut seeds: Vec<Option<u64>> = report.rows.iter().map(|r| r.seed).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let means = seeds.iter().take_while(|s| s.is_none()).count();
    seeds.rotate_left(means);
    for seed in seeds {
        let _ = writeln!(text, "\nseed {}", seed_label(seed));
        let sample = report.rows.iter().find(|r| r.seed == seed && r.algorithm.is_none());
        let mut header = format!("{:<10} {:<9}", "metric", "stat");
        if let Some(row) = sample {
            for (n, _) in &row.by_size {
                let _ = write!(header, " {:>7}", format!("{n} cl."));
            }
        }
        let _ = writeln!(text, "{header} {:>7}", "overall");
        for r in report.rows.iter().filter(|r| r.seed == seed && r.algorithm.is_none()) {
            for (stat, pick) in [("spearman", 0), ("kendall", 1)] {
                let get = |c: &CorrelationCell| if pick == 0 { c.spearman } else { c.kendall };
                let mut line = format!("{:<10} {:<9}", r.metric.name(), stat);
                for (_, c) in &r.by_size {
                    let _ = write!(line, " {}", fmt_opt(get(c)));
                }
                let _ = writeln!(text, "{line} {}", fmt_opt(get(&r.overall)));
            }
        }
    }
    write_summary(&out.join("table2.txt"), &text)
}

/// The selected federation for one seed, metric and K, against the
/// all-client run and the Average/Best over all subsets of that size.
/// `algorithm` is `None` for values averaged over algorithms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectEvalRow {
    pub seed: u64,
    pub metric: Metric,
    pub k: usize,
    pub algorithm: Option<Algorithm>,
    pub selected: Vec<String>,
    pub selected_auroc: f64,
    pub all_clients_auroc: f64,
    pub average: f64,
    pub best: f64,
    pub single: f64,
    /// Equal to or better than the all-client run.
    pub underline: bool,
    /// Equal to Best.
    pub bold: bool,
    /// Above Average.
    pub asterisk: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectEvalReport {
    pub rows: Vec<SelectEvalRow>,
}

impl SelectEvalReport {
    pub fn averaged(&self, seed: u64, metric: Metric, k: usize) -> Option<&SelectEvalRow> {
        self.rows
            .iter()
            .find(|r| r.seed == seed && r.metric == metric && r.k == k && r.algorithm.is_none())
    }
}

/// Host test AUROC of the federation `{host} + subjects`, for one algorithm
/// or averaged over all configured algorithms; the empty subset is Single.
fn subset_auroc(cfg: &ExperimentConfig, sweep: &SweepOutput, seed: u64, algorithm: Option<Algorithm>, subjects: &[String]) -> Result<f64> {
    let get = |key: CellKey| {
        sweep
            .get(&key)
            .map(|r| r.test_macro_auroc)
            .ok_or_else(|| Error::InvalidInput(format!("missing run {key}")))
    };
    if subjects.is_empty() {
        return get(CellKey::single(seed, &cfg.host));
    }
    match algorithm {
        Some(a) => get(CellKey::fed(seed, &cfg.host, a, subjects.to_vec())),
        None => {
            let mut total = 0.0;
            for &a in &cfg.algorithms {
                total += get(CellKey::fed(seed, &cfg.host, a, subjects.to_vec()))?;
            }
            Ok(total / cfg.algorithms.len() as f64)
        }
    }
}

pub fn select_eval(cfg: &ExperimentConfig, sweep: &SweepOutput) -> Result<SelectEvalReport> {
    let subjects = cfg.subjects();
    let subsets = super::subject_subsets(&subjects);
    let mut algorithms: Vec<Option<Algorithm>> = vec![None];
    algorithms.extend(cfg.algorithms.iter().map(|&a| Some(a)));
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for &metric in &cfg.metrics {
            let record = sweep
                .record(seed, metric)
                .ok_or_else(|| Error::InvalidInput(format!("no {metric} scores for seed {seed}")))?;
            for &k in &cfg.k_values {
                let selected = record.selected(SelectionRule::TopK(k), &subjects)?;
                for &algorithm in &algorithms {
                    let same_size: Vec<&Vec<String>> = subsets.iter().filter(|s| s.len() + 1 == k).collect();
                    let mut values = Vec::with_capacity(same_size.len().max(1));
                    if k == 1 {
                        values.push(subset_auroc(cfg, sweep, seed, algorithm, &[])?);
                    }
                    for s in same_size {
                        values.push(subset_auroc(cfg, sweep, seed, algorithm, s)?);
                    }
                    let average = values.iter().sum::<f64>() / values.len() as f64;
                    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let selected_auroc = subset_auroc(cfg, sweep, seed, algorithm, &selected)?;
                    let all_clients_auroc = subset_auroc(cfg, sweep, seed, algorithm, &subjects)?;
                    rows.push(SelectEvalRow {
                        seed,
                        metric,
                        k,
                        algorithm,
                        selected: selected.clone(),
                        selected_auroc,
                        all_clients_auroc,
                        average,
                        best,
                        single: subset_auroc(cfg, sweep, seed, None, &[])?,
                        underline: selected_auroc >= all_clients_auroc,
                        bold: selected_auroc == best,
                        asterisk: selected_auroc > average,
                    });
                }
            }
        }
    }
    Ok(SelectEvalReport { rows })
}

#[derive(Serialize)]
struct SelectEvalCsvRow {
    seed: u64,
    metric: Metric,
    k: usize,
    algorithm: String,
    selected: String,
    selected_auroc: f64,
    all_clients_auroc: f64,
    average: f64,
    best: f64,
    single: f64,
    underline: bool,
    bold: bool,
    asterisk: bool,
}

/// Writes `select_eval.json`, `table3.csv` and `table3.txt`.
pub fn write_select_eval(report: &SelectEvalReport, out: &Path) -> Result<()> {
    write_json(&out.join("select_eval.json"), report)?;
    let csv: Vec<SelectEvalCsvRow> = report
        .rows
        .iter()
        .map(|r| SelectEvalCsvRow {
            seed: r.seed,
            metric: r.metric,
            k: r.k,
            algorithm: r.algorithm.map_or_else(|| "average".to_owned(), |a| a.to_string()),
            selected: r.selected.join("+"),
            selected_auroc: r.selected_auroc,
            all_clients_auroc: r.all_clients_auroc,
            average: r.average,
            best: r.best,
            single: r.single,
            underline: r.underline,
            bold: r.bold,
            asterisk: r.asterisk,
        })
        .collect();
    write_csv(&out.join("table3.csv"), &csv)?;

    let mut text = String::from(
        "Host test AUROC of similarity-selected federations, averaged over algorithms\n\
         _ = at least the all-client run, ! = equals Best, * = above Average\n",
    );
    let _ = writeln!(
        text,
        "\n{:>4} {:<10} {:>2} {:<24} {:>8} {:>8} {:>8} {:>8}  flags",
        "seed", "metric", "K", "selected", "auroc", "all", "average", "best"
    );
    for r in report.rows.iter().filter(|r| r.algorithm.is_none()) {
        let flags: String = [(r.underline, '_'), (r.bold, '!'), (r.asterisk, '*')]
            .iter()
            .map(|&(on, c)| if on { c } else { ' ' })
            .collect();
        let _ = writeln!(
            text,
            "{:>4} {:<10} {:>2} {:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.4}  {flags}",
            r.seed,
            r.metric.name(),
            r.k,
            r.selected.join("+"),
            r.selected_auroc,
            r.all_clients_auroc,
            r.average,
            r.best
        );
    }
    write_summary(&out.join("table3.txt"), &text)
}
