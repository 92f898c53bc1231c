// SPDX-License-Identifier: Apache-2.0

//! Federated training rounds with host-centric early stopping.
//!
//! Every participant starts a round from the broadcast parameters (for the
//! FedBN family: the global dense tensors plus its own normalization
//! tensors), trains `local_epochs` epochs on its training split, and the
//! results are merged in participant order. The host's validation macro
//! AUROC after each round decides checkpointing and early stopping.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{
    self, EncodedPatient, Model, OptimConfig, ParamSet, Prox, Tag, TrainSchedule,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{self, EvalResult};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    FedAvg,
    FedProx,
    FedBN,
    FedPxN,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::FedAvg, Algorithm::FedProx, Algorithm::FedBN, Algorithm::FedPxN];

    pub fn uses_prox(self) -> bool {
        matches!(self, Algorithm::FedProx | Algorithm::FedPxN)
    }

    pub fn keeps_norm_local(self) -> bool {
        matches!(self, Algorithm::FedBN | Algorithm::FedPxN)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "FedAvg",
            Algorithm::FedProx => "FedProx",
            Algorithm::FedBN => "FedBN",
            Algorithm::FedPxN => "FedPxN",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FLRunConfig {
    pub algorithm: Algorithm,
    pub max_rounds: usize,
    pub local_epochs: usize,
    pub patience: usize,
    pub mu: f64,
    pub participants: Vec<String>,
    pub host: String,
    pub seed: u64,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub execution: Execution,
}

impl FLRunConfig {
    pub fn new(algorithm: Algorithm, host: impl Into<String>, participants: Vec<String>, seed: u64) -> Self {
        Self {
            algorithm,
            max_rounds: 300,
            local_epochs: 1,
            patience: 10,
            mu: 0.01,
            participants,
            host: host.into(),
            seed,
            optim: OptimConfig::default(),
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.participants.is_empty() {
            return Err(Error::Config("federation needs at least one participant".into()));
        }
        if !self.participants.contains(&self.host) {
            return Err(Error::Config(format!("host {:?} is not a participant", self.host)));
        }
        let mut ids = self.participants.clone();
        ids.sort();
        ids.dedup();
        if ids.len() != self.participants.len() {
            return Err(Error::Config("duplicate participant ids".into()));
        }
        if self.max_rounds < 1 || self.patience < 1 || self.local_epochs < 1 {
            return Err(Error::Config("max_rounds, patience and local_epochs must be >= 1".into()));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::Config(format!("mu must be finite and >= 0, got {}", self.mu)));
        }
        Ok(())
    }
}

/// A client's tokenized splits.
#[derive(Debug, Clone)]
pub struct FedClient {
    pub id: String,
    pub train: Vec<EncodedPatient>,
    pub valid: Vec<EncodedPatient>,
    pub test: Vec<EncodedPatient>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub client_losses: BTreeMap<String, f64>,
    pub host_val_macro_auroc: f64,
    pub wall_time_ms: f64,
    pub checksum: String,
}

/// Parameters after aggregation: one global set, or one personalized set per
/// participant (FedBN family), in participant order.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelState {
    Global(ParamSet),
    Personalized(Vec<(String, ParamSet)>),
}

impl ModelState {
    pub fn host_params(&self, host: &str) -> &ParamSet {
        match self {
            ModelState::Global(p) => p,
            ModelState::Personalized(list) => {
                &list.iter().find(|(id, _)| id == host).expect("host is a participant").1
            }
        }
    }

    pub fn checksum(&self) -> String {
        match self {
            ModelState::Global(p) => p.checksum(),
            ModelState::Personalized(list) => {
                let mut h = Sha256::new();
                for (id, p) in list {
                    h.update(id.as_bytes());
                    p.hash_into(&mut h);
                }
                encoder_hex(&h.finalize())
            }
        }
    }

    pub fn bit_eq(&self, other: &ModelState) -> bool {
        match (self, other) {
            (ModelState::Global(a), ModelState::Global(b)) => a.bit_eq(b),
            (ModelState::Personalized(a), ModelState::Personalized(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|((i, p), (j, q))| i == j && p.bit_eq(q))
            }
            _ => false,
        }
    }
}

fn encoder_hex(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    /// State at the round with the best host validation metric.
    pub best: ModelState,
    pub best_round: usize,
    pub best_val_macro_auroc: f64,
    /// State after the last executed round.
    pub last: ModelState,
    pub logs: Vec<RoundLog>,
    pub host: String,
}

impl FederationOutcome {
    pub fn best_host_params(&self) -> &ParamSet {
        self.best.host_params(&self.host)
    }

    pub fn rounds_run(&self) -> usize {
        self.logs.len()
    }
}

/// Element-wise weighted mean; weights are normalized to sum to one.
pub fn aggregate_fedavg(client_params: &[&ParamSet], weights: &[f64]) -> Result<ParamSet> {
    let norm = normalized_weights(client_params, weights)?;
    let mut out = client_params[0].clone();
    for (t, src) in out.tensors.iter_mut().enumerate() {
        weighted_mean_into(&mut src.values, client_params, &norm, t);
    }
    Ok(out)
}

/// Dense tensors replaced by the weighted mean; `norm` tensors stay with
/// their client. Output `i` is client `i`'s next starting point.
pub fn aggregate_fedbn(client_params: &[&ParamSet], weights: &[f64]) -> Result<Vec<ParamSet>> {
    let norm = normalized_weights(client_params, weights)?;
    let mut shared = client_params[0].clone();
    for (t, tensor) in shared.tensors.iter_mut().enumerate() {
        if tensor.tag == Tag::Dense {
            weighted_mean_into(&mut tensor.values, client_params, &norm, t);
        }
    }
    Ok(client_params
        .iter()
        .map(|own| {
            let mut p = (*own).clone();
            for (dst, src) in p.tensors.iter_mut().zip(&shared.tensors) {
                if dst.tag == Tag::Dense {
                    dst.values.copy_from_slice(&src.values);
                }
            }
            p
        })
        .collect())
}

fn normalized_weights(client_params: &[&ParamSet], weights: &[f64]) -> Result<Vec<f64>> {
    if client_params.is_empty() {
        return Err(Error::InvalidInput("nothing to aggregate".into()));
    }
    if weights.len() != client_params.len() {
        return Err(Error::Shape(format!("{} weights for {} clients", weights.len(), client_params.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("weights sum to zero".into()));
    }
    for p in &client_params[1..] {
        if !client_params[0].same_layout(p) {
            return Err(Error::Shape("client parameter sets differ in names, shapes or tags".into()));
        }
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

fn weighted_mean_into(dst: &mut [f64], clients: &[&ParamSet], weights: &[f64], tensor: usize) {
    // Seeding with the first client's scaled values keeps a single client
    // with weight 1 bit-identical to its input.
    let first = &clients[0].tensors[tensor].values;
    dst.iter_mut().zip(first).for_each(|(d, x)| *d = weights[0] * x);
    for (c, w) in clients.iter().zip(weights).skip(1) {
        dst.iter_mut()
            .zip(&c.tensors[tensor].values)
            .for_each(|(d, x)| *d += w * x);
    }
}

/// Inference-mode evaluation of `params` on `data`.
pub fn evaluate(model: &Model, params: &ParamSet, data: &[EncodedPatient]) -> Result<EvalResult> {
    let refs: Vec<&EncodedPatient> = data.iter().collect();
    let (_, logits) = model.infer(params, &refs)?;
    let scores: Vec<Vec<f64>> = logits.into_iter().map(|l| l.0).collect();
    let labels: Vec<Vec<f64>> = data.iter().map(|p| p.labels.clone()).collect();
    metrics::evaluate(&scores, &labels)
}

/// Per-client training stream, independent of scheduling.
pub fn client_seed(run_seed: u64, client_id: &str) -> u64 {
    seeds::for_party(run_seed, client_id)
}

pub fn init_seed(run_seed: u64) -> u64 {
    seeds::derive(run_seed, &[0x1a17])
}

pub fn run_federation(model: &Model, cfg: &FLRunConfig, clients: &[FedClient]) -> Result<FederationOutcome> {
    let host = find_client(clients, &cfg.host)?;
    let evaluator = |p: &ParamSet| Ok(evaluate(model, p, &host.valid)?.macro_auroc);
    run_federation_with(model, cfg, clients, &evaluator)
}

/// [`run_federation`] with a caller-supplied host validation metric.
pub fn run_federation_with(
    model: &Model,
    cfg: &FLRunConfig,
    clients: &[FedClient],
    host_metric: &(dyn Fn(&ParamSet) -> Result<f64> + Sync),
) -> Result<FederationOutcome> {
    cfg.validate()?;
    let participants: Vec<&FedClient> = cfg
        .participants
        .iter()
        .map(|id| find_client(clients, id))
        .collect::<Result<_>>()?;
    for c in &participants {
        if c.train.is_empty() {
            return Err(Error::InvalidInput(format!("client {} has no training data", c.id)));
        }
    }
    let weights: Vec<f64> = participants.iter().map(|c| c.train.len() as f64).collect();
    let init = model.init(init_seed(cfg.seed));
    let mut state = if cfg.algorithm.keeps_norm_local() {
        ModelState::Personalized(participants.iter().map(|c| (c.id.clone(), init.clone())).collect())
    } else {
        ModelState::Global(init)
    };

    let mut logs = Vec::new();
    let mut best: Option<(ModelState, usize, f64)> = None;
    let mut stale = 0usize;
    for round in 0..cfg.max_rounds {
        let started = Instant::now();
        let starts: Vec<&ParamSet> = participants
            .iter()
            .enumerate()
            .map(|(i, c)| match &state {
                ModelState::Global(p) => p,
                ModelState::Personalized(list) => {
                    debug_assert_eq!(list[i].0, c.id);
                    &list[i].1
                }
            })
            .collect();
        let jobs: Vec<usize> = (0..participants.len()).collect();
        let trained = cfg.execution.map(&jobs, |&i| {
            let client = participants[i];
            let prox = cfg.algorithm.uses_prox().then_some(Prox { mu: cfg.mu, anchor: starts[i] });
            encoder::train_local(
                model,
                starts[i],
                &client.train,
                cfg.local_epochs,
                &cfg.optim,
                prox,
                TrainSchedule {
                    seed: client_seed(cfg.seed, &client.id),
                    first_epoch: (round * cfg.local_epochs) as u64,
                },
            )
            .map_err(|e| Error::Divergence(format!("client {} failed in round {round}: {e}", client.id)))
        });
        let trained = trained.into_iter().collect::<Result<Vec<_>>>()?;

        let client_losses = participants
            .iter()
            .zip(&trained)
            .map(|(c, t)| (c.id.clone(), t.epoch_losses.last().copied().unwrap_or(f64::NAN)))
            .collect();
        let locals: Vec<&ParamSet> = trained.iter().map(|t| &t.params).collect();
        state = if cfg.algorithm.keeps_norm_local() {
            let next = aggregate_fedbn(&locals, &weights)?;
            ModelState::Personalized(participants.iter().map(|c| c.id.clone()).zip(next).collect())
        } else {
            ModelState::Global(aggregate_fedavg(&locals, &weights)?)
        };

        let val = host_metric(state.host_params(&cfg.host))?;
        logs.push(RoundLog {
            round,
            client_losses,
            host_val_macro_auroc: val,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            checksum: state.checksum(),
        });
        let improved = best.as_ref().is_none_or(|(_, _, b)| val > *b);
        if improved {
            best = Some((state.clone(), round, val));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best, best_round, best_val) = best.expect("at least one round ran");
    Ok(FederationOutcome {
        best,
        best_round,
        best_val_macro_auroc: best_val,
        last: state,
        logs,
        host: cfg.host.clone(),
    })
}

/// Host-only training with the same early stopping and checkpointing.
pub fn train_single(model: &Model, host: &FedClient, cfg: &FLRunConfig) -> Result<FederationOutcome> {
    let single = FLRunConfig {
        algorithm: Algorithm::FedAvg,
        participants: vec![host.id.clone()],
        host: host.id.clone(),
        mu: 0.0,
        ..cfg.clone()
    };
    run_federation(model, &single, std::slice::from_ref(host))
}

fn find_client<'a>(clients: &'a [FedClient], id: &str) -> Result<&'a FedClient> {
    clients
        .iter()
        .find(|c| c.id == id)
        .ok_or_else(|| Error::Config(format!("unknown client {id:?}")))
}

pub fn write_round_logs(path: &Path, logs: &[RoundLog]) -> Result<()> {
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for log in logs {
        serde_json::to_writer(&mut out, log).map_err(|e| Error::json(path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
