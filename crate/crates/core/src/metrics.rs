// SPDX-License-Identifier: Apache-2.0

//! AUROC, macro AUROC and rank correlations.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `None` where the task has a single class in the evaluated split.
    pub per_task: Vec<Option<f64>>,
    pub macro_auroc: f64,
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        // Positions i+1 ..= j share the rank (i + 1 + j) / 2.
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Rank-sum form, O(n log n). `None` for single-class
/// input.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos as f64 * n_neg as f64)))
}

/// Mean over tasks with a defined AUROC.
pub fn macro_auroc(per_task: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = per_task.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Undefined("no task has a defined AUROC".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Per-task and macro AUROC from per-patient task scores and 0/1 labels.
pub fn evaluate(scores: &[Vec<f64>], labels: &[Vec<f64>]) -> Result<EvalResult> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Shape(format!("{} score rows for {} label rows", scores.len(), labels.len())));
    }
    let t = scores[0].len();
    let per_task = (0..t)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
            let y: Vec<bool> = labels.iter().map(|row| row[c] > 0.5).collect();
            auroc(&s, &y)
        })
        .collect::<Result<Vec<_>>>()?;
    let macro_auroc = macro_auroc(&per_task)?;
    Ok(EvalResult { per_task, macro_auroc })
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("lengths {} and {} differ", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidInput("need at least two observations".into()));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("NaN observation".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(xs) || constant(ys) {
        return Err(Error::InvalidInput("rank correlation of a constant sequence".into()));
    }
    Ok(())
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson correlation of average ranks. Doubled average ranks are
/// integers, so every sum is exact and only the final ratio rounds.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let doubled = |v: &[f64]| -> Vec<i128> { average_ranks(v).iter().map(|r| (2.0 * r) as i128).collect() };
    let (rx, ry) = (doubled(xs), doubled(ys));
    let n = rx.len() as i128;
    let (sx, sy): (i128, i128) = (rx.iter().sum(), ry.iter().sum());
    let sxy: i128 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
    let sxx: i128 = rx.iter().map(|a| a * a).sum();
    let syy: i128 = ry.iter().map(|b| b * b).sum();
    let num = (n * sxy - sx * sy) as f64;
    let den = ((n * sxx - sx * sx) as f64 * (n * syy - sy * sy) as f64).sqrt();
    Ok((num / den).clamp(-1.0, 1.0))
}

/// Kendall tau-b via Knight's O(n log n) algorithm.
pub fn kendall(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(ys[a].total_cmp(&ys[b])));

    let pairs = |len: u64| len * len.saturating_sub(1) / 2;
    let n0 = pairs(n as u64);

    // Ties in x, and joint ties in (x, y).
    let (mut n1, mut n3) = (0u64, 0u64);
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && xs[idx[j]] == xs[idx[i]] {
            j += 1;
        }
        n1 += pairs((j - i) as u64);
        let mut k = i;
        while k < j {
            let mut m = k + 1;
            while m < j && ys[idx[m]] == ys[idx[k]] {
                m += 1;
            }
            n3 += pairs((m - k) as u64);
            k = m;
        }
        i = j;
    }

    // Discordant pairs are the inversions of y in x-order.
    let mut seq: Vec<f64> = idx.iter().map(|&k| ys[k]).collect();
    let mut buf = seq.clone();
    let swaps = merge_count(&mut seq, &mut buf);

    let mut n2 = 0u64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && seq[j] == seq[i] {
            j += 1;
        }
        n2 += pairs((j - i) as u64);
        i = j;
    }

    let concordant_minus_discordant = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * swaps as i64;
    let denom = (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt();
    Ok((concordant_minus_discordant as f64 / denom).clamp(-1.0, 1.0))
}

/// Stable merge sort returning the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j].total_cmp(&v[i]) == Ordering::Less {
            buf[k] = v[j];
            count += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    let k2 = k + mid - i;
    buf[k2..n].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    count
}
