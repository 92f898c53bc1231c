// SPDX-License-Identifier: Apache-2.0

//! Two-stage patient encoder with hand-written backpropagation.
//!
//! Stage one (event encoder) embeds tokens, takes the mean over non-PAD
//! positions and applies `blocks_per_stage` blocks of
//! `linear -> normalization -> tanh`. Stage two (event aggregator) applies
//! the same block structure per event, optionally preceded by single-head
//! self-attention across the patient's events, then averages over events to
//! produce the patient embedding. `n_tasks` affine heads read the embedding.
//!
//! Normalization standardizes each feature over all events in the batch
//! during training and uses running statistics at inference.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{ParamSet, Tag, Tensor};
use super::vocab::PAD;
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub max_len: usize,
    pub n_tasks: usize,
    pub blocks_per_stage: usize,
    pub attention: bool,
    pub norm_eps: f64,
    pub norm_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2000,
            dim: 32,
            max_len: 32,
            n_tasks: 4,
            blocks_per_stage: 2,
            attention: false,
            norm_eps: 1e-5,
            norm_momentum: 0.1,
        }
    }
}

/// A patient in model-ready form: one padded token-id row per event.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPatient {
    pub events: Vec<Vec<u32>>,
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLogits(pub Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct BlockIdx {
    attn: Option<[usize; 3]>,
    weight: usize,
    scale: usize,
    offset: usize,
    running_mean: usize,
    running_var: usize,
}

/// Architecture plus the tensor positions it reads from a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    embedding: usize,
    encoder: Vec<BlockIdx>,
    aggregator: Vec<BlockIdx>,
    head_weight: usize,
    head_bias: usize,
    template: ParamSet,
}

/// Batch statistics of one normalization layer, for running-average updates.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub running_mean: usize,
    pub running_var: usize,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    a: Array2<f64>,
}

struct BlockCache {
    /// Block input before attention.
    input: Array2<f64>,
    /// Input to the linear map (after attention when enabled).
    pre_linear: Array2<f64>,
    attn: Vec<AttnCache>,
    normed: Array2<f64>,
    inv_std: Array1<f64>,
    output: Array2<f64>,
}

struct Forward {
    /// Non-PAD token ids per event.
    tokens: Vec<Vec<u32>>,
    /// Event row range per patient.
    spans: Vec<(usize, usize)>,
    encoder: Vec<BlockCache>,
    aggregator: Vec<BlockCache>,
    events_out: Array2<f64>,
    embeddings: Array2<f64>,
    logits: Array2<f64>,
    stats: Vec<NormStats>,
}

/// Result of a training-mode pass with gradients.
pub struct GradOutput {
    pub loss: f64,
    pub grad: ParamSet,
    pub stats: Vec<NormStats>,
}

/// FedProx proximal term `(mu / 2) * ||w - anchor||^2`.
#[derive(Debug, Clone, Copy)]
pub struct Prox<'a> {
    pub mu: f64,
    pub anchor: &'a ParamSet,
}

fn block_names(stage: &str, b: usize, attention: bool) -> Vec<(String, Tag, bool)> {
    let p = format!("{stage}.{b}");
    let mut out = Vec::new();
    if attention {
        for n in ["query", "key", "value"] {
            out.push((format!("{p}.attn.{n}"), Tag::Dense, true));
        }
    }
    out.push((format!("{p}.weight"), Tag::Dense, true));
    out.push((format!("{p}.norm.scale"), Tag::Norm, false));
    out.push((format!("{p}.norm.offset"), Tag::Norm, false));
    out.push((format!("{p}.norm.running_mean"), Tag::Norm, false));
    out.push((format!("{p}.norm.running_var"), Tag::Norm, false));
    out
}

fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sum over tasks of binary cross-entropy with logits.
pub fn loss(logits: &TaskLogits, labels: &[f64]) -> Result<f64> {
    if logits.0.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} labels",
            logits.0.len(),
            labels.len()
        )));
    }
    Ok(logits.0.iter().zip(labels).map(|(&z, &y)| bce_with_logits(z, y)).sum())
}

fn view<'a>(t: &'a Tensor, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), &t.values).expect("layout checked")
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.dim == 0 || config.max_len == 0 || config.n_tasks == 0 || config.vocab_size < 2 {
            return Err(Error::Config(format!("degenerate model config {config:?}")));
        }
        if config.blocks_per_stage == 0 {
            return Err(Error::Config("need at least one block per stage".into()));
        }
        let d = config.dim;
        let mut tensors = vec![Tensor::zeros("token_embedding", Tag::Dense, vec![config.vocab_size, d])];
        let mut stages: Vec<Vec<BlockIdx>> = Vec::new();
        for (stage, attention) in [("encoder", false), ("aggregator", config.attention)] {
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_stage {
                let start = tensors.len();
                for (name, tag, matrix) in block_names(stage, b, attention) {
                    let shape = if matrix { vec![d, d] } else { vec![d] };
                    tensors.push(Tensor::zeros(name, tag, shape));
                }
                let base = start + if attention { 3 } else { 0 };
                blocks.push(BlockIdx {
                    attn: attention.then(|| [start, start + 1, start + 2]),
                    weight: base,
                    scale: base + 1,
                    offset: base + 2,
                    running_mean: base + 3,
                    running_var: base + 4,
                });
            }
            stages.push(blocks);
        }
        let head_weight = tensors.len();
        tensors.push(Tensor::zeros("head.weight", Tag::Dense, vec![config.n_tasks, d]));
        tensors.push(Tensor::zeros("head.bias", Tag::Dense, vec![config.n_tasks]));
        let aggregator = stages.pop().expect("two stages");
        let encoder = stages.pop().expect("two stages");
        Ok(Self {
            config,
            embedding: 0,
            encoder,
            aggregator,
            head_weight,
            head_bias: head_weight + 1,
            template: ParamSet::new(tensors),
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Random initialization from `seed`.
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = seeds::rng(seeds::derive(seed, &[0x1417]));
        let d = self.config.dim as f64;
        let unit = Normal::new(0.0, 1.0).expect("valid");
        let mut params = self.template.clone();
        for t in &mut params.tensors {
            let name = t.name.clone();
            if name.ends_with(".norm.scale") || name.ends_with(".running_var") {
                t.values.iter_mut().for_each(|x| *x = 1.0);
            } else if name.ends_with(".norm.offset") || name.ends_with(".running_mean") || name == "head.bias" {
                // zeros
            } else {
                let scale = if name == "token_embedding" { 1.0 } else { 1.0 / d.sqrt() };
                t.values.iter_mut().for_each(|x| *x = scale * unit.sample(&mut rng));
            }
        }
        params
    }

    pub fn check(&self, params: &ParamSet) -> Result<()> {
        if self.template.same_layout(params) {
            Ok(())
        } else {
            Err(Error::Shape(
                "parameter set does not match the model configuration".into(),
            ))
        }
    }

    fn forward(&self, params: &ParamSet, batch: &[&EncodedPatient], mode: Mode) -> Result<Forward> {
        self.check(params)?;
        let d = self.config.dim;
        let mut tokens = Vec::new();
        let mut spans = Vec::with_capacity(batch.len());
        for p in batch {
            if p.events.is_empty() {
                return Err(Error::InvalidInput("patient has no events".into()));
            }
            let start = tokens.len();
            for ev in &p.events {
                tokens.push(ev.iter().copied().filter(|&t| t != PAD).collect::<Vec<u32>>());
            }
            spans.push((start, tokens.len()));
        }
        let n_events = tokens.len();
        let emb = view(&params.tensors[self.embedding], self.config.vocab_size, d);
        let mut x = Array2::<f64>::zeros((n_events, d));
        for (i, toks) in tokens.iter().enumerate() {
            if toks.is_empty() {
                continue;
            }
            let mut row = x.row_mut(i);
            for &t in toks {
                let t = t as usize;
                if t >= self.config.vocab_size {
                    return Err(Error::Shape(format!("token id {t} outside vocabulary")));
                }
                row += &emb.row(t);
            }
            row /= toks.len() as f64;
        }

        let mut stats = Vec::new();
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for blk in &self.encoder {
            let cache = self.block_forward(params, blk, x, &spans, mode, &mut stats);
            x = cache.output.clone();
            encoder.push(cache);
        }
        let events_out = x.clone();
        let mut aggregator = Vec::with_capacity(self.aggregator.len());
        for blk in &self.aggregator {
            let cache = self.block_forward(params, blk, x, &spans, mode, &mut stats);
            x = cache.output.clone();
            aggregator.push(cache);
        }

        let mut embeddings = Array2::<f64>::zeros((batch.len(), d));
        for (p, &(a, b)) in spans.iter().enumerate() {
            let mean = x.slice(s![a..b, ..]).mean_axis(Axis(0)).expect("non-empty span");
            embeddings.row_mut(p).assign(&mean);
        }
        let logits = self.head(params, &embeddings);
        Ok(Forward {
            tokens,
            spans,
            encoder,
            aggregator,
            events_out,
            embeddings,
            logits,
            stats,
        })
    }

    fn head(&self, params: &ParamSet, embeddings: &Array2<f64>) -> Array2<f64> {
        let w = view(&params.tensors[self.head_weight], self.config.n_tasks, self.config.dim);
        let b = &params.tensors[self.head_bias].values;
        let mut logits = embeddings.dot(&w.t());
        for mut row in logits.rows_mut() {
            row.iter_mut().zip(b).for_each(|(z, bias)| *z += bias);
        }
        logits
    }

    fn block_forward(
        &self,
        params: &ParamSet,
        blk: &BlockIdx,
        input: Array2<f64>,
        spans: &[(usize, usize)],
        mode: Mode,
        stats: &mut Vec<NormStats>,
    ) -> BlockCache {
        let d = self.config.dim;
        let mut attn = Vec::new();
        let pre_linear = match blk.attn {
            None => input.clone(),
            Some([qi, ki, vi]) => {
                let wq = view(&params.tensors[qi], d, d);
                let wk = view(&params.tensors[ki], d, d);
                let wv = view(&params.tensors[vi], d, d);
                let scale = 1.0 / (d as f64).sqrt();
                let mut out = input.clone();
                for &(a, b) in spans {
                    let h = input.slice(s![a..b, ..]);
                    let q = h.dot(&wq.t());
                    let k = h.dot(&wk.t());
                    let v = h.dot(&wv.t());
                    let mut sc = q.dot(&k.t()) * scale;
                    softmax_rows(&mut sc);
                    let mut slot = out.slice_mut(s![a..b, ..]);
                    slot += &sc.dot(&v);
                    attn.push(AttnCache { q, k, v, a: sc });
                }
                out
            }
        };
        let w = view(&params.tensors[blk.weight], d, d);
        let u = pre_linear.dot(&w.t());
        let eps = self.config.norm_eps;
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = u.mean_axis(Axis(0)).expect("non-empty batch");
                let centered = &u - &mean;
                let var = (&centered * &centered).mean_axis(Axis(0)).expect("non-empty batch");
                stats.push(NormStats {
                    running_mean: blk.running_mean,
                    running_var: blk.running_var,
                    mean: mean.clone(),
                    var: var.clone(),
                });
                (mean, var)
            }
            Mode::Eval => (
                Array1::from(params.tensors[blk.running_mean].values.clone()),
                Array1::from(params.tensors[blk.running_var].values.clone()),
            ),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let normed = (&u - &mean) * &inv_std;
        let gamma = Array1::from(params.tensors[blk.scale].values.clone());
        let beta = Array1::from(params.tensors[blk.offset].values.clone());
        let output = (&normed * &gamma + &beta).mapv(f64::tanh);
        BlockCache {
            input,
            pre_linear,
            attn,
            normed,
            inv_std,
            output,
        }
    }

    /// Backward through one block; returns the gradient w.r.t. its input.
    fn block_backward(
        &self,
        params: &ParamSet,
        blk: &BlockIdx,
        cache: &BlockCache,
        spans: &[(usize, usize)],
        d_out: Array2<f64>,
        grad: &mut ParamSet,
    ) -> Array2<f64> {
        let d = self.config.dim;
        let n = d_out.nrows() as f64;
        let d_y = &d_out * &cache.output.mapv(|y| 1.0 - y * y);
        let d_gamma = (&d_y * &cache.normed).sum_axis(Axis(0));
        let d_beta = d_y.sum_axis(Axis(0));
        add_into(&mut grad.tensors[blk.scale].values, d_gamma.iter());
        add_into(&mut grad.tensors[blk.offset].values, d_beta.iter());

        let gamma = Array1::from(params.tensors[blk.scale].values.clone());
        let d_norm = &d_y * &gamma;
        let sum_dn = d_norm.sum_axis(Axis(0));
        let sum_dn_n = (&d_norm * &cache.normed).sum_axis(Axis(0));
        let d_u = (&d_norm * n - &sum_dn - &cache.normed * &sum_dn_n) * &(&cache.inv_std / n);

        let w = view(&params.tensors[blk.weight], d, d);
        let d_w = d_u.t().dot(&cache.pre_linear);
        add_into(&mut grad.tensors[blk.weight].values, d_w.iter());
        let d_pre = d_u.dot(&w);

        let Some([qi, ki, vi]) = blk.attn else {
            return d_pre;
        };
        let wq = view(&params.tensors[qi], d, d);
        let wk = view(&params.tensors[ki], d, d);
        let wv = view(&params.tensors[vi], d, d);
        let scale = 1.0 / (d as f64).sqrt();
        let mut d_in = d_pre.clone();
        let mut d_wq = Array2::<f64>::zeros((d, d));
        let mut d_wk = Array2::<f64>::zeros((d, d));
        let mut d_wv = Array2::<f64>::zeros((d, d));
        for (&(a, b), ac) in spans.iter().zip(&cache.attn) {
            let h = cache.input.slice(s![a..b, ..]);
            let d_att = d_pre.slice(s![a..b, ..]);
            let d_a = d_att.dot(&ac.v.t());
            let d_v = ac.a.t().dot(&d_att);
            let row_dot = (&d_a * &ac.a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_s = (&ac.a * &(&d_a - &row_dot)) * scale;
            let d_q = d_s.dot(&ac.k);
            let d_k = d_s.t().dot(&ac.q);
            d_wq += &d_q.t().dot(&h);
            d_wk += &d_k.t().dot(&h);
            d_wv += &d_v.t().dot(&h);
            let mut slot = d_in.slice_mut(s![a..b, ..]);
            slot += &d_q.dot(&wq);
            slot += &d_k.dot(&wk);
            slot += &d_v.dot(&wv);
        }
        add_into(&mut grad.tensors[qi].values, d_wq.iter());
        add_into(&mut grad.tensors[ki].values, d_wk.iter());
        add_into(&mut grad.tensors[vi].values, d_wv.iter());
        d_in
    }

    /// Mean batch loss and its exact gradient in training mode, plus the
    /// proximal term when `prox` is given.
    pub fn grad(&self, params: &ParamSet, batch: &[&EncodedPatient], prox: Option<Prox<'_>>) -> Result<GradOutput> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("gradient of an empty batch".into()));
        }
        let fwd = self.forward(params, batch, Mode::Train)?;
        let t = self.config.n_tasks;
        let n_pat = batch.len() as f64;
        let mut total = 0.0;
        let mut d_logits = Array2::<f64>::zeros((batch.len(), t));
        for (p, patient) in batch.iter().enumerate() {
            if patient.labels.len() != t {
                return Err(Error::Shape(format!("{} labels for {t} tasks", patient.labels.len())));
            }
            for c in 0..t {
                let z = fwd.logits[[p, c]];
                let y = patient.labels[c];
                total += bce_with_logits(z, y);
                d_logits[[p, c]] = (sigmoid(z) - y) / n_pat;
            }
        }
        let mut loss = total / n_pat;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite batch loss {loss} over {} patients; max |logit| = {}",
                batch.len(),
                fwd.logits.iter().fold(0.0f64, |a, b| a.max(b.abs()))
            )));
        }

        let d = self.config.dim;
        let mut grad = params.zeros_like();
        let w_head = view(&params.tensors[self.head_weight], t, d);
        add_into(&mut grad.tensors[self.head_weight].values, d_logits.t().dot(&fwd.embeddings).iter());
        add_into(&mut grad.tensors[self.head_bias].values, d_logits.sum_axis(Axis(0)).iter());
        let d_emb = d_logits.dot(&w_head);

        let n_events = fwd.tokens.len();
        let mut d_x = Array2::<f64>::zeros((n_events, d));
        for (p, &(a, b)) in fwd.spans.iter().enumerate() {
            let share = &d_emb.row(p) / (b - a) as f64;
            for r in a..b {
                d_x.row_mut(r).assign(&share);
            }
        }
        for (blk, cache) in self.aggregator.iter().zip(&fwd.aggregator).rev() {
            d_x = self.block_backward(params, blk, cache, &fwd.spans, d_x, &mut grad);
        }
        for (blk, cache) in self.encoder.iter().zip(&fwd.encoder).rev() {
            d_x = self.block_backward(params, blk, cache, &fwd.spans, d_x, &mut grad);
        }
        let g_emb = &mut grad.tensors[self.embedding].values;
        for (i, toks) in fwd.tokens.iter().enumerate() {
            if toks.is_empty() {
                continue;
            }
            let share = 1.0 / toks.len() as f64;
            let row = d_x.row(i);
            for &tok in toks {
                let dst = &mut g_emb[tok as usize * d..(tok as usize + 1) * d];
                dst.iter_mut().zip(row.iter()).for_each(|(g, r)| *g += share * r);
            }
        }

        // A zero weight contributes nothing; skipping it keeps signed zeros intact.
        if let Some(Prox { mu, anchor }) = prox.filter(|p| p.mu != 0.0) {
            params.check_layout(anchor)?;
            let mut sq = 0.0;
            for ((g, w), a) in grad.tensors.iter_mut().zip(&params.tensors).zip(&anchor.tensors) {
                if w.is_statistic() {
                    continue;
                }
                for ((gi, wi), ai) in g.values.iter_mut().zip(&w.values).zip(&a.values) {
                    let diff = wi - ai;
                    *gi += mu * diff;
                    sq += diff * diff;
                }
            }
            loss += 0.5 * mu * sq;
        }

        Ok(GradOutput {
            loss,
            grad,
            stats: fwd.stats,
        })
    }

    /// Mean batch loss in training mode (no gradient), including the
    /// proximal term. Used by finite-difference checks.
    pub fn batch_loss(&self, params: &ParamSet, batch: &[&EncodedPatient], prox: Option<Prox<'_>>) -> Result<f64> {
        let fwd = self.forward(params, batch, Mode::Train)?;
        let mut total = 0.0;
        for (p, patient) in batch.iter().enumerate() {
            let logits = TaskLogits(fwd.logits.row(p).to_vec());
            total += loss(&logits, &patient.labels)?;
        }
        let mut out = total / batch.len() as f64;
        if let Some(Prox { mu, anchor }) = prox {
            let sq: f64 = params
                .tensors
                .iter()
                .zip(&anchor.tensors)
                .filter(|(w, _)| !w.is_statistic())
                .flat_map(|(w, a)| w.values.iter().zip(&a.values).map(|(x, y)| (x - y) * (x - y)))
                .sum();
            out += 0.5 * mu * sq;
        }
        Ok(out)
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running_stats(&self, params: &mut ParamSet, stats: &[NormStats]) {
        let m = self.config.norm_momentum;
        for st in stats {
            let rm = &mut params.tensors[st.running_mean].values;
            rm.iter_mut().zip(st.mean.iter()).for_each(|(r, x)| *r = (1.0 - m) * *r + m * x);
            let rv = &mut params.tensors[st.running_var].values;
            rv.iter_mut().zip(st.var.iter()).for_each(|(r, x)| *r = (1.0 - m) * *r + m * x);
        }
    }

    /// Event vectors `Z` for one patient (inference mode).
    pub fn encode_events(&self, params: &ParamSet, events: &[Vec<u32>]) -> Result<Array2<f64>> {
        let patient = EncodedPatient {
            events: events.to_vec(),
            labels: vec![0.0; self.config.n_tasks],
        };
        let fwd = self.forward(params, &[&patient], Mode::Eval)?;
        Ok(fwd.events_out)
    }

    /// Patient embedding from event vectors (inference mode).
    pub fn aggregate(&self, params: &ParamSet, events: &Array2<f64>) -> Result<Embedding> {
        self.check(params)?;
        if events.nrows() == 0 {
            return Err(Error::InvalidInput("cannot aggregate zero events".into()));
        }
        if events.ncols() != self.config.dim {
            return Err(Error::Shape(format!("event vectors have dimension {}", events.ncols())));
        }
        let spans = [(0, events.nrows())];
        let mut x = events.clone();
        let mut stats = Vec::new();
        for blk in &self.aggregator {
            x = self.block_forward(params, blk, x, &spans, Mode::Eval, &mut stats).output;
        }
        Ok(Embedding(x.mean_axis(Axis(0)).expect("non-empty").to_vec()))
    }

    pub fn predict(&self, params: &ParamSet, embedding: &Embedding) -> Result<TaskLogits> {
        self.check(params)?;
        if embedding.dim() != self.config.dim {
            return Err(Error::Shape(format!("embedding has dimension {}", embedding.dim())));
        }
        let e = Array2::from_shape_vec((1, self.config.dim), embedding.0.clone()).expect("shape");
        Ok(TaskLogits(self.head(params, &e).row(0).to_vec()))
    }

    /// Inference-mode embeddings and logits for a set of patients.
    pub fn infer(&self, params: &ParamSet, patients: &[&EncodedPatient]) -> Result<(Vec<Embedding>, Vec<TaskLogits>)> {
        let mut embeddings = Vec::with_capacity(patients.len());
        let mut logits = Vec::with_capacity(patients.len());
        // Inference rows are independent; chunking only bounds memory.
        for chunk in patients.chunks(256) {
            if chunk.is_empty() {
                continue;
            }
            let fwd = self.forward(params, chunk, Mode::Eval)?;
            for p in 0..chunk.len() {
                embeddings.push(Embedding(fwd.embeddings.row(p).to_vec()));
                logits.push(TaskLogits(fwd.logits.row(p).to_vec()));
            }
        }
        Ok((embeddings, logits))
    }

    pub fn embed(&self, params: &ParamSet, patients: &[&EncodedPatient]) -> Result<Vec<Embedding>> {
        Ok(self.infer(params, patients)?.0)
    }
}

fn add_into<'a>(dst: &mut [f64], src: impl Iterator<Item = &'a f64>) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
