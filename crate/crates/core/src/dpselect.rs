// SPDX-License-Identifier: Apache-2.0

//! Participant selection from differentially private averaged embeddings.
//!
//! The host trains a model on its own data and hands the weights to every
//! candidate. Each party embeds its training patients with that frozen
//! model and clips every embedding to norm `C`. Candidates release the mean
//! of their clipped embeddings plus Gaussian noise with
//! `sigma = (C / m) * sqrt(2 ln(1.25 / delta)) / epsilon`; the host keeps its
//! own mean noise-free. The host scores each release against its own mean
//! and keeps the `K - 1` most similar candidates.
//!
//! For KL divergence the released quantity is the mean of per-patient
//! softmax vectors instead, privatized the same way and projected back onto
//! the probability simplex.
//!
//! Only [`PrivateAveragedEmbedding`] crosses the host/subject boundary:
//! [`SubjectSite::share`] is the sole way a subject's data leaves it.

use std::cmp::Ordering;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncodedPatient, Embedding, Model, ParamSet};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fedcore::{self, FLRunConfig, FedClient};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DPConfig {
    pub clip_norm: f64,
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for DPConfig {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            epsilon: 1.0,
            delta: 1e-5,
        }
    }
}

impl DPConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) || !self.clip_norm.is_finite() {
            return Err(Error::Config(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

/// Gaussian-mechanism noise scale for a mean of `m` vectors clipped at `C`.
pub fn gaussian_sigma(dp: &DPConfig, m: usize) -> f64 {
    dp.clip_norm / m as f64 * (2.0 * (1.25 / dp.delta).ln()).sqrt() / dp.epsilon
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Euclidean,
    Kl,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Cosine, Metric::Euclidean, Metric::Kl];

    pub fn higher_is_more_similar(self) -> bool {
        self == Metric::Cosine
    }

    pub fn representation(self) -> Representation {
        match self {
            Metric::Kl => Representation::SoftmaxMean,
            _ => Representation::Mean,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
            Metric::Kl => "kl",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

/// What a party averages before release.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Mean of clipped patient embeddings.
    Mean,
    /// Mean of clipped per-patient softmax vectors.
    SoftmaxMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivateAveragedEmbedding {
    pub values: Vec<f64>,
    pub m: usize,
    pub dp: DPConfig,
    pub noised: bool,
    pub sigma: f64,
    pub representation: Representation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub metric: Metric,
    pub value: f64,
    pub higher_is_more_similar: bool,
}

impl SimilarityScore {
    fn new(metric: Metric, value: f64) -> Self {
        Self {
            metric,
            value,
            higher_is_more_similar: metric.higher_is_more_similar(),
        }
    }

    /// Score on a higher-is-more-similar scale.
    pub fn oriented(&self) -> f64 {
        if self.higher_is_more_similar {
            self.value
        } else {
            -self.value
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `l * min(1, C / ||l||)`; the zero vector maps to itself.
pub fn clip_embedding(l: &Embedding, clip_norm: f64) -> Embedding {
    Embedding(clip_vec(&l.0, clip_norm))
}

fn clip_vec(v: &[f64], clip_norm: f64) -> Vec<f64> {
    let n = norm(v);
    // A rescaled vector can land a few ulps above C; treating that band as
    // already clipped keeps clipping idempotent.
    if n <= clip_norm * (1.0 + 4.0 * f64::EPSILON) {
        v.to_vec()
    } else {
        let f = clip_norm / n;
        v.iter().map(|x| x * f).collect()
    }
}

fn mean_of(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows.first().ok_or_else(|| Error::InvalidInput("cannot average an empty set".into()))?;
    let d = first.len();
    let mut out = vec![0.0; d];
    for r in rows {
        if r.len() != d {
            return Err(Error::Shape(format!("dimension {} vs {d}", r.len())));
        }
        out.iter_mut().zip(r).for_each(|(o, x)| *o += x);
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

pub fn average_embeddings(ls: &[Embedding]) -> Result<Embedding> {
    let rows: Vec<Vec<f64>> = ls.iter().map(|l| l.0.clone()).collect();
    Ok(Embedding(mean_of(&rows)?))
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Mean of per-embedding softmax vectors.
pub fn softmax_average(ls: &[Embedding]) -> Result<Vec<f64>> {
    let rows: Vec<Vec<f64>> = ls.iter().map(|l| softmax(&l.0)).collect();
    mean_of(&rows)
}

/// Adds `N(0, sigma^2 I)` with `sigma` from [`gaussian_sigma`].
pub fn privatize(avg: &Embedding, m: usize, dp: &DPConfig, seed: u64) -> Result<PrivateAveragedEmbedding> {
    privatize_vec(&avg.0, m, dp, seed, Representation::Mean)
}

fn privatize_vec(avg: &[f64], m: usize, dp: &DPConfig, seed: u64, representation: Representation) -> Result<PrivateAveragedEmbedding> {
    dp.validate()?;
    if m < 1 {
        return Err(Error::InvalidInput("privatizing an average of zero patients".into()));
    }
    let sigma = gaussian_sigma(dp, m);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(format!("noise scale {sigma}: {e}")))?;
    let mut rng = seeds::rng(seed);
    let mut values: Vec<f64> = avg.iter().map(|x| x + normal.sample(&mut rng)).collect();
    if representation == Representation::SoftmaxMean {
        project_to_simplex(&mut values);
    }
    Ok(PrivateAveragedEmbedding {
        values,
        m,
        dp: *dp,
        noised: true,
        sigma,
        representation,
    })
}

/// Clamps negatives to zero and renormalizes; all-zero becomes uniform.
fn project_to_simplex(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    } else {
        let u = 1.0 / v.len() as f64;
        v.iter_mut().for_each(|x| *x = u);
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<SimilarityScore> {
    same_dim(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("cosine similarity with a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(SimilarityScore::new(Metric::Cosine, (dot / (na * nb)).clamp(-1.0, 1.0)))
}

pub fn euclidean(a: &[f64], b: &[f64]) -> Result<SimilarityScore> {
    same_dim(a, b)?;
    let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    Ok(SimilarityScore::new(Metric::Euclidean, d))
}

pub const KL_SMOOTHING: f64 = 1e-10;
const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// `KL(p || q)` after adding [`KL_SMOOTHING`] to both and renormalizing.
pub fn kl(p: &[f64], q: &[f64]) -> Result<SimilarityScore> {
    same_dim(p, q)?;
    for v in [p, q] {
        let total: f64 = v.iter().sum();
        if v.iter().any(|x| !(*x >= 0.0)) || (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::InvalidInput("KL divergence needs probability vectors".into()));
        }
    }
    let smooth = |v: &[f64]| {
        let z: f64 = v.iter().map(|x| x + KL_SMOOTHING).sum();
        v.iter().map(|x| (x + KL_SMOOTHING) / z).collect::<Vec<f64>>()
    };
    let (ps, qs) = (smooth(p), smooth(q));
    let d: f64 = ps.iter().zip(&qs).map(|(a, b)| a * (a / b).ln()).sum();
    Ok(SimilarityScore::new(Metric::Kl, d.max(0.0)))
}

fn same_dim(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("dimensions {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// Host-anchored score: KL runs host first.
pub fn score(metric: Metric, host: &PrivateAveragedEmbedding, subject: &PrivateAveragedEmbedding) -> Result<SimilarityScore> {
    if host.representation != metric.representation() || subject.representation != metric.representation() {
        return Err(Error::InvalidInput(format!("{metric} needs {:?} summaries", metric.representation())));
    }
    match metric {
        Metric::Cosine => cosine(&host.values, &subject.values),
        Metric::Euclidean => euclidean(&host.values, &subject.values),
        Metric::Kl => kl(&host.values, &subject.values),
    }
}

fn clipped_summary(model: &Model, params: &ParamSet, patients: &[EncodedPatient], representation: Representation, clip_norm: f64) -> Result<Vec<f64>> {
    if patients.is_empty() {
        return Err(Error::InvalidInput("no patients to summarize".into()));
    }
    let refs: Vec<&EncodedPatient> = patients.iter().collect();
    let embeddings = model.embed(params, &refs)?;
    let rows: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| match representation {
            Representation::Mean => clip_vec(&e.0, clip_norm),
            Representation::SoftmaxMean => clip_vec(&softmax(&e.0), clip_norm),
        })
        .collect();
    mean_of(&rows)
}

/// A candidate institution. Its patients never leave this type except as a
/// privatized average.
pub struct SubjectSite<'a> {
    client: &'a FedClient,
}

impl<'a> SubjectSite<'a> {
    pub fn new(client: &'a FedClient) -> Self {
        Self { client }
    }

    pub fn id(&self) -> &str {
        &self.client.id
    }

    /// Embeds the training split with the host's weights, clips, averages
    /// and adds noise. The noise stream depends only on `run_seed` and this
    /// site's id.
    pub fn share(&self, model: &Model, host_weights: &ParamSet, representation: Representation, dp: &DPConfig, run_seed: u64) -> Result<PrivateAveragedEmbedding> {
        dp.validate()?;
        let avg = clipped_summary(model, host_weights, &self.client.train, representation, dp.clip_norm)?;
        let tag = match representation {
            Representation::Mean => 1,
            Representation::SoftmaxMean => 2,
        };
        let seed = seeds::derive(seeds::for_party(run_seed, &self.client.id), &[tag]);
        privatize_vec(&avg, self.client.train.len(), dp, seed, representation)
    }
}

/// The host's own clipped average, kept local and therefore noise-free.
pub fn host_reference(model: &Model, host_weights: &ParamSet, host: &FedClient, representation: Representation, dp: &DPConfig) -> Result<PrivateAveragedEmbedding> {
    dp.validate()?;
    let values = clipped_summary(model, host_weights, &host.train, representation, dp.clip_norm)?;
    Ok(PrivateAveragedEmbedding {
        values,
        m: host.train.len(),
        dp: *dp,
        noised: false,
        sigma: 0.0,
        representation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Keep `K - 1` candidates; `K` counts the host.
    TopK(usize),
    /// Keep every candidate at least as similar as this raw score
    /// (`>=` for cosine, `<=` for distances).
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub metric: Metric,
    pub rule: SelectionRule,
    pub dp: DPConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub client_id: String,
    pub metric: Metric,
    pub score: f64,
    pub sigma: f64,
    pub m: usize,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub host: String,
    pub metric: Metric,
    pub selected: Vec<String>,
    pub candidates: Vec<CandidateReport>,
    pub scores: Vec<SimilarityScore>,
}

/// Ids to keep, most similar first; ties go to the smaller client id.
pub fn select(scored: &[(String, SimilarityScore)], rule: SelectionRule) -> Result<Vec<String>> {
    let mut ranked: Vec<&(String, SimilarityScore)> = scored.iter().collect();
    ranked.sort_by(|a, b| {
        b.1.oriented()
            .partial_cmp(&a.1.oriented())
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    match rule {
        SelectionRule::TopK(k) => {
            if k < 1 {
                return Err(Error::Config("K must be at least 1 (the host)".into()));
            }
            if k - 1 > scored.len() {
                return Err(Error::Config(format!("K - 1 = {} exceeds the {} candidates", k - 1, scored.len())));
            }
            Ok(ranked.into_iter().take(k - 1).map(|(id, _)| id.clone()).collect())
        }
        SelectionRule::Threshold(t) => Ok(ranked
            .into_iter()
            .filter(|(_, s)| if s.higher_is_more_similar { s.value >= t } else { s.value <= t })
            .map(|(id, _)| id.clone())
            .collect()),
    }
}

/// Steps two to nine, given the host's trained weights.
pub fn run_selection_with_model(
    model: &Model,
    host_weights: &ParamSet,
    host: &FedClient,
    candidates: &[FedClient],
    cfg: &SelectionConfig,
    execution: Execution,
) -> Result<SelectionOutcome> {
    cfg.dp.validate()?;
    if let SelectionRule::TopK(k) = cfg.rule {
        if k < 1 || k - 1 > candidates.len() {
            return Err(Error::Config(format!("K = {k} with {} candidates", candidates.len())));
        }
    }
    if candidates.iter().any(|c| c.id == host.id) {
        return Err(Error::Config("the host cannot be its own candidate".into()));
    }
    let representation = cfg.metric.representation();
    let reference = host_reference(model, host_weights, host, representation, &cfg.dp)?;
    let shared = execution.map(candidates, |c| SubjectSite::new(c).share(model, host_weights, representation, &cfg.dp, cfg.seed));
    let mut scored = Vec::with_capacity(candidates.len());
    let mut releases = Vec::with_capacity(candidates.len());
    for (c, release) in candidates.iter().zip(shared) {
        let release = release?;
        scored.push((c.id.clone(), score(cfg.metric, &reference, &release)?));
        releases.push(release);
    }
    let selected = select(&scored, cfg.rule)?;
    let candidates_report = scored
        .iter()
        .zip(&releases)
        .map(|((id, s), r)| CandidateReport {
            client_id: id.clone(),
            metric: cfg.metric,
            score: s.value,
            sigma: r.sigma,
            m: r.m,
            selected: selected.contains(id),
        })
        .collect();
    Ok(SelectionOutcome {
        host: host.id.clone(),
        metric: cfg.metric,
        selected,
        candidates: candidates_report,
        scores: scored.into_iter().map(|(_, s)| s).collect(),
    })
}

/// The full protocol: the host first trains its own model (Single), then
/// runs [`run_selection_with_model`] with the best checkpoint.
pub fn run_selection_protocol(
    model: &Model,
    host: &FedClient,
    candidates: &[FedClient],
    cfg: &SelectionConfig,
    train_cfg: &FLRunConfig,
) -> Result<(SelectionOutcome, ParamSet)> {
    let single = fedcore::train_single(model, host, train_cfg)?;
    let weights = single.best_host_params().clone();
    let outcome = run_selection_with_model(model, &weights, host, candidates, cfg, train_cfg.execution)?;
    Ok((outcome, weights))
}
