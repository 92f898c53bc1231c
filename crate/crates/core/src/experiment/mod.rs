// SPDX-License-Identifier: Apache-2.0

//! Experiment runner: data generation, the federation sweep over every
//! participant subset, similarity/benefit correlations and selection
//! evaluation.
//!
//! Everything written under an output directory is a pure function of the
//! [`ExperimentConfig`], except for the first line of each `.txt` summary,
//! which carries a timestamp.

mod report;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dpselect::{DPConfig, Metric};
use crate::encoder::{self, EncodedPatient, Model, ModelConfig, OptimConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fedcore::{Algorithm, FLRunConfig, FedClient};
use crate::linearizer::{self, LinearizedEvent};
use crate::seeds;
use crate::synthdata::{self, ClientDataset, ClientFiles, ClientGenSpec, SchemaProfile};

pub use report::{
    correlate, performance_delta, select_eval, write_correlation, write_select_eval, CorrelationCell,
    CorrelationReport, CorrelationRow, DeltaPair, SelectEvalReport, SelectEvalRow,
};
pub use sweep::{
    cmd_select, enumerate_cells, read_sweep, run_sweep, CandidateScore, CellKey, CellResult, Method, SelectionRecord, SweepOutput,
};

/// One client of the experiment: how to generate it and how its schema
/// differs from the reference naming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEntry {
    pub spec: ClientGenSpec,
    #[serde(default)]
    pub schema: SchemaProfile,
}

/// Federation settings shared by every sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingTemplate {
    pub max_rounds: usize,
    pub local_epochs: usize,
    pub patience: usize,
    pub mu: f64,
    pub optim: OptimConfig,
}

impl Default for TrainingTemplate {
    fn default() -> Self {
        Self {
            max_rounds: 60,
            local_epochs: 1,
            patience: 10,
            mu: 0.01,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainingTemplate {
    pub fn run_config(&self, algorithm: Algorithm, host: &str, participants: Vec<String>, seed: u64, execution: Execution) -> FLRunConfig {
        FLRunConfig {
            algorithm,
            max_rounds: self.max_rounds,
            local_epochs: self.local_epochs,
            patience: self.patience,
            mu: self.mu,
            participants,
            host: host.to_owned(),
            seed,
            optim: self.optim.clone(),
            execution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub clients: Vec<ClientEntry>,
    pub host: String,
    pub algorithms: Vec<Algorithm>,
    /// Run seeds: splits, initialization, shuffling and DP noise.
    pub seeds: Vec<u64>,
    /// Seed of the generated patient cohorts.
    pub data_seed: u64,
    pub metrics: Vec<Metric>,
    pub k_values: Vec<usize>,
    pub dp: DPConfig,
    pub training: TrainingTemplate,
    pub model: ModelConfig,
    pub execution: Execution,
    /// Keep the best checkpoint of every sweep cell, not just Single.
    pub save_checkpoints: bool,
    /// Progress lines on stderr.
    pub verbose: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::benchmark()
    }
}

fn renamed_schema(event_types: &[(&str, &str)], features: &[(&str, &str)], code_offset: i64) -> SchemaProfile {
    let map = |pairs: &[(&str, &str)]| pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    SchemaProfile {
        event_type_renames: map(event_types),
        feature_name_renames: map(features),
        code_offset,
    }
}

impl ExperimentConfig {
    /// The five-client shift benchmark: a host, an unshifted twin, one
    /// mildly shifted client and two strongly shifted clients that use
    /// their own schema naming.
    pub fn benchmark() -> Self {
        let client = |id: &str, shift: f64, shift_seed: u64, schema: SchemaProfile| ClientEntry {
            spec: ClientGenSpec {
                client_id: id.to_owned(),
                shift,
                shift_seed,
                ..ClientGenSpec::default()
            },
            schema,
        };
        let site_b = renamed_schema(
            &[("labevents", "lab"), ("inputevents", "infusions"), ("prescriptions", "medication")],
            &[("itemid", "labid"), ("valueuom", "unit"), ("drug", "drugname")],
            100000,
        );
        let site_c = renamed_schema(&[("labevents", "labresults"), ("inputevents", "intake")], &[("amountuom", "rateuom")], 0);
        Self {
            clients: vec![
                client("host", 0.0, 0, SchemaProfile::identity()),
                client("twin", 0.0, 0, SchemaProfile::identity()),
                client("mild", 0.3, 1, SchemaProfile::identity()),
                client("far_a", 0.8, 2, site_b),
                client("far_b", 0.8, 3, site_c),
            ],
            host: "host".into(),
            algorithms: Algorithm::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            data_seed: 0,
            metrics: Metric::ALL.to_vec(),
            k_values: vec![2, 3, 4],
            dp: DPConfig::default(),
            training: TrainingTemplate::default(),
            model: ModelConfig::default(),
            execution: Execution::default(),
            save_checkpoints: false,
            verbose: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::Config("no clients configured".into()));
        }
        let mut ids: Vec<&str> = self.clients.iter().map(|c| c.spec.client_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.clients.len() {
            return Err(Error::Config("client ids must be unique".into()));
        }
        if !ids.contains(&self.host.as_str()) {
            return Err(Error::Config(format!("host {:?} is not among the clients", self.host)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("at least one algorithm is required".into()));
        }
        for &k in &self.k_values {
            if k < 1 || k > self.clients.len() {
                return Err(Error::Config(format!("K = {k} outside 1..={}", self.clients.len())));
            }
        }
        let tasks = self.clients[0].spec.n_tasks;
        if self.clients.iter().any(|c| c.spec.n_tasks != tasks) {
            return Err(Error::Config("all clients must share the task count".into()));
        }
        if tasks != self.model.n_tasks {
            return Err(Error::Config(format!("model has {} heads for {tasks} tasks", self.model.n_tasks)));
        }
        self.dp.validate()?;
        self.run_config(Algorithm::FedAvg, vec![self.host.clone()], 0).validate()?;
        Model::new(self.model.clone())?;
        Ok(())
    }

    pub fn subjects(&self) -> Vec<String> {
        self.clients
            .iter()
            .map(|c| c.spec.client_id.clone())
            .filter(|id| *id != self.host)
            .collect()
    }

    pub fn run_config(&self, algorithm: Algorithm, participants: Vec<String>, seed: u64) -> FLRunConfig {
        self.training.run_config(algorithm, &self.host, participants, seed, self.execution)
    }

    /// Settings that determine results; runtime-only knobs are normalized.
    fn fingerprint(&self) -> String {
        let canonical = Self {
            execution: Execution::Parallel,
            verbose: false,
            save_checkpoints: false,
            ..self.clone()
        };
        serde_json::to_string_pretty(&canonical).expect("config serializes")
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn client_seed(cfg: &ExperimentConfig, id: &str) -> u64 {
    seeds::for_party(cfg.data_seed, id)
}

/// Generates every client in memory.
pub fn generate_datasets(cfg: &ExperimentConfig) -> Result<Vec<ClientDataset>> {
    cfg.validate()?;
    cfg.clients
        .iter()
        .map(|c| {
            let seed = client_seed(cfg, &c.spec.client_id);
            let ds = synthdata::generate_client(&c.spec, seed)?;
            if c.schema.is_identity() {
                Ok(ds)
            } else {
                synthdata::apply_schema_heterogeneity(&ds, &c.schema, seed)
            }
        })
        .collect()
}

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

/// Writes every client's dataset files under `out/data`.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ClientFiles>> {
    let dir = data_dir(out);
    generate_datasets(cfg)?
        .iter()
        .map(|ds| synthdata::write_client(&dir, ds))
        .collect()
}

/// Reads the clients written by [`cmd_generate`].
pub fn load_datasets(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ClientDataset>> {
    let dir = data_dir(out);
    cfg.clients
        .iter()
        .map(|c| synthdata::read_client(&dir, &c.spec.client_id))
        .collect()
}

/// One seed's tokenized clients and the model that fits them.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub model: Model,
    pub vocab: Vocabulary,
    pub clients: Vec<FedClient>,
}

impl Prepared {
    pub fn client(&self, id: &str) -> Result<&FedClient> {
        self.clients
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::Config(format!("unknown client {id:?}")))
    }
}

/// Resplits every client with the run seed, builds one vocabulary from the
/// union of all training splits and tokenizes everything with it.
pub fn prepare(cfg: &ExperimentConfig, datasets: &[ClientDataset], seed: u64) -> Result<Prepared> {
    let mut linearized: Vec<Vec<Vec<LinearizedEvent>>> = Vec::with_capacity(datasets.len());
    let mut splits = Vec::with_capacity(datasets.len());
    for ds in datasets {
        linearized.push(
            ds.patients
                .iter()
                .map(|p| linearizer::linearize_patient(p, &ds.dictionary))
                .collect::<Result<_>>()?,
        );
        splits.push(synthdata::make_splits(ds.patients.len(), seeds::for_party(seed, &ds.client_id))?);
    }
    let train_events = linearized
        .iter()
        .zip(&splits)
        .flat_map(|(patients, s)| s.train.iter().flat_map(move |&i| patients[i].iter()));
    let vocab = Vocabulary::build(train_events, cfg.model.vocab_size)?;
    let max_len = cfg.model.max_len;

    let clients = datasets
        .iter()
        .zip(&linearized)
        .zip(&splits)
        .map(|((ds, events), s)| {
            let encode = |idx: &[usize]| -> Vec<EncodedPatient> {
                idx.iter()
                    .map(|&i| EncodedPatient {
                        events: events[i].iter().map(|e| encoder::tokenize(e, &vocab, max_len)).collect(),
                        labels: ds.patients[i].labels.iter().map(|&y| f64::from(y)).collect(),
                    })
                    .collect()
            };
            FedClient {
                id: ds.client_id.clone(),
                train: encode(&s.train),
                valid: encode(&s.valid),
                test: encode(&s.test),
            }
        })
        .collect();
    Ok(Prepared {
        seed,
        model: Model::new(cfg.model.clone())?,
        vocab,
        clients,
    })
}

/// Every non-empty subset of `subjects`, by size and then in the order the
/// subjects are listed.
pub fn subject_subsets(subjects: &[String]) -> Vec<Vec<String>> {
    let n = subjects.len();
    let mut masks: Vec<Vec<usize>> = (1u64..(1 << n))
        .map(|m| (0..n).filter(|i| m & (1 << i) != 0).collect())
        .collect();
    masks.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    masks
        .into_iter()
        .map(|idx| idx.into_iter().map(|i| subjects[i].clone()).collect())
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidInput(format!("csv row for {}: {e}", path.display())))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("csv {}: {e}", path.display())))?;
    write_text(path, &String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Plain-text report whose only run-dependent content is the first line.
fn write_summary(path: &Path, body: &str) -> Result<()> {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_text(path, &format!("# generated at unix time {now}\n{body}"))
}

#[cfg(test)]
mod tests;
