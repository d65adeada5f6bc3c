use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{PyramidMixer, RESERVED_ROWS};

/// Where one held-out target landed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RankResult {
    pub user_id: String,
    /// 1-based rank among the candidates.
    pub rank: usize,
    pub candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub mrr: f64,
    pub users: usize,
}

pub fn hit_at(rank: usize, k: usize) -> f64 {
    if rank <= k { 1.0 } else { 0.0 }
}

pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 }
}

pub fn mrr_at(rank: usize, k: usize) -> f64 {
    if rank <= k { 1.0 / rank as f64 } else { 0.0 }
}

/// Means of the three metrics over `ranks`, summed in order.
pub fn metrics_from_ranks(ranks: &[usize], k: usize) -> MetricReport {
    let (mut hr, mut ndcg, mut mrr) = (0.0, 0.0, 0.0);
    for &r in ranks {
        hr += hit_at(r, k);
        ndcg += ndcg_at(r, k);
        mrr += mrr_at(r, k);
    }
    let n = ranks.len().max(1) as f64;
    MetricReport {
        k,
        hr: hr / n,
        ndcg: ndcg / n,
        mrr: mrr / n,
        users: ranks.len(),
    }
}

/// Rank of column `target` among columns not marked in `excluded`.
/// Higher scores rank first; equal scores rank by lower column index.
/// Returns `(rank, candidate count)`.
pub fn rank_of(scores: &[f32], target: usize, excluded: &[bool]) -> (usize, usize) {
    let t = scores[target];
    let mut rank = 1;
    let mut candidates = 1;
    for (j, &s) in scores.iter().enumerate() {
        if j == target || excluded[j] {
            continue;
        }
        candidates += 1;
        if s > t || (s == t && j < target) {
            rank += 1;
        }
    }
    (rank, candidates)
}

/// Worker threads for evaluation: `PYMX_THREADS` if set, else all cores.
pub fn eval_threads() -> usize {
    std::env::var("PYMX_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

const EVAL_BATCH: usize = 256;

/// Scores `samples` in parallel and maps each score row through `f`,
/// returning results in sample order.
fn map_score_rows<R: Send>(
    model: &PyramidMixer<f32>,
    ds: &Dataset,
    samples: &[Sample],
    f: impl Fn(usize, &[f32]) -> R + Sync,
) -> Result<Vec<R>> {
    let threads = eval_threads().min(samples.len().div_ceil(EVAL_BATCH)).max(1);
    let per = samples.len().div_ceil(threads).max(1);
    let len = model.config().max_len;
    let run = |offset: usize, part: &[Sample]| -> Result<Vec<R>> {
        let mut out = Vec::with_capacity(part.len());
        for (c, chunk) in part.chunks(EVAL_BATCH).enumerate() {
            let batch = Batch::from_samples(&ds.split.sequences, chunk, len);
            let scores = model.scores(&batch)?;
            let width = scores.last_dim();
            for (b, row) in scores.data().chunks(width).enumerate() {
                out.push(f(offset + c * EVAL_BATCH + b, row));
            }
        }
        Ok(out)
    };
    if threads == 1 {
        return run(0, samples);
    }
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = samples
            .chunks(per)
            .enumerate()
            .map(|(i, part)| {
                let run = &run;
                s.spawn(move || run(i * per, part))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Score columns of the items in the user's history before `sample.end`,
/// the target's own column excepted.
fn history_mask(ds: &Dataset, sample: Sample, columns: usize) -> Vec<bool> {
    let target = ds.target(sample);
    let mut excluded = vec![false; columns];
    for item in ds.sequence(sample).items().take(sample.end) {
        if item != target && item >= RESERVED_ROWS {
            excluded[item - RESERVED_ROWS] = true;
        }
    }
    excluded
}

/// Full-ranking rank of every sample's target with seen items removed.
pub fn rank_samples(model: &PyramidMixer<f32>, ds: &Dataset, samples: &[Sample]) -> Result<Vec<RankResult>> {
    map_score_rows(model, ds, samples, |i, row| {
        let sample = samples[i];
        let excluded = history_mask(ds, sample, row.len());
        let (rank, candidates) = rank_of(row, ds.target(sample) - RESERVED_ROWS, &excluded);
        RankResult {
            user_id: ds.sequence(sample).user_id.clone(),
            rank,
            candidates,
        }
    })
}

/// HR/NDCG/MRR@`k` under full ranking.
pub fn evaluate_ranking(model: &PyramidMixer<f32>, ds: &Dataset, samples: &[Sample], k: usize) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let ranks: Vec<usize> = rank_samples(model, ds, samples)?.iter().map(|r| r.rank).collect();
    Ok(metrics_from_ranks(&ranks, k))
}

/// Ranks each target against `negatives` unseen items drawn uniformly at
/// random instead of the whole catalogue. Reported for comparison with
/// published numbers that use this protocol; it is not the main metric.
pub fn evaluate_sampled(
    model: &PyramidMixer<f32>,
    ds: &Dataset,
    samples: &[Sample],
    k: usize,
    negatives: usize,
    seed: u64,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let ranks = map_score_rows(model, ds, samples, |i, row| {
        let sample = samples[i];
        let target = ds.target(sample) - RESERVED_ROWS;
        let excluded = history_mask(ds, sample, row.len());
        let pool: Vec<usize> = (0..row.len()).filter(|&j| j != target && !excluded[j]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let picked = sample_indices(&mut rng, pool.len(), negatives.min(pool.len()));
        let t = row[target];
        1 + picked
            .iter()
            .map(|p| pool[p])
            .filter(|&j| row[j] > t || (row[j] == t && j < target))
            .count()
    })?;
    Ok(metrics_from_ranks(&ranks, k))
}
