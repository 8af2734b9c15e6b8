//! Budget-limited rationale annotation: instance scoring strategies, subset
//! selection, and the batch composer that keeps at least one third of every
//! training batch rationale-annotated.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::extract;
use crate::model::{EncodedInstance, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionStrategy {
    Random,
    /// Lowest gold-class confidence first.
    Lc,
    /// Highest gold-class confidence first.
    Hc,
    /// Lowest mean top-k'% importance score first.
    Lis,
    /// Highest mean top-k'% importance score first.
    His,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 5] = [
        SelectionStrategy::Random,
        SelectionStrategy::Lc,
        SelectionStrategy::Hc,
        SelectionStrategy::Lis,
        SelectionStrategy::His,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::Random => "Random",
            SelectionStrategy::Lc => "LC",
            SelectionStrategy::Hc => "HC",
            SelectionStrategy::Lis => "LIS",
            SelectionStrategy::His => "HIS",
        }
    }
}

impl std::str::FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" | "rand" => Ok(SelectionStrategy::Random),
            "lc" => Ok(SelectionStrategy::Lc),
            "hc" => Ok(SelectionStrategy::Hc),
            "lis" => Ok(SelectionStrategy::Lis),
            "his" => Ok(SelectionStrategy::His),
            other => Err(Error::Config(format!("unknown selection strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionScore {
    pub instance_id: u64,
    /// Mean of the per-seed scores.
    pub score: f64,
    pub seed_scores: Vec<f64>,
}

/// Mean of the top round(k'%·n) entries (at least one).
pub fn mean_top_fraction(probs: &[f64], k_prime_percent: f64) -> f64 {
    let n = probs.len();
    let count = (((k_prime_percent / 100.0) * n as f64).round() as usize).clamp(1, n);
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sorted[..count].iter().sum::<f64>() / count as f64
}

/// Score every training instance with one trained model per seed; the final
/// score is the mean of the seed-level scores. Confidence strategies use the
/// gold-class softmax probability, importance strategies the mean of the
/// top-k'% IxG rationale probabilities.
pub fn score_instances(
    no_er_models: &[ModelParams],
    train: &[EncodedInstance],
    strategy: SelectionStrategy,
    k_prime_percent: f64,
    gamma: f64,
) -> Result<Vec<SelectionScore>> {
    if strategy == SelectionStrategy::Random {
        return Err(Error::InvalidValue {
            what: "score_instances",
            details: "random selection assigns no scores".into(),
        });
    }
    if no_er_models.is_empty() {
        return Err(Error::InvalidValue {
            what: "score_instances",
            details: "at least one trained model is required".into(),
        });
    }
    if !(k_prime_percent > 0.0 && k_prime_percent < 100.0) {
        return Err(Error::InvalidValue {
            what: "score_instances",
            details: format!("k' must be in (0, 100), got {k_prime_percent}"),
        });
    }
    let mut out = Vec::with_capacity(train.len());
    for inst in train {
        let mut seed_scores = Vec::with_capacity(no_er_models.len());
        for model in no_er_models {
            let mut trace = model.forward(&inst.token_ids)?;
            let s = match strategy {
                SelectionStrategy::Lc | SelectionStrategy::Hc => {
                    trace.class_probabilities()[inst.targets[0]]
                }
                SelectionStrategy::Lis | SelectionStrategy::His => {
                    let r = extract::extract_ixg(&mut trace, &inst.targets, gamma)?;
                    mean_top_fraction(&r.probs, k_prime_percent)
                }
                SelectionStrategy::Random => unreachable!(),
            };
            seed_scores.push(s);
        }
        let score = seed_scores.iter().sum::<f64>() / seed_scores.len() as f64;
        out.push(SelectionScore { instance_id: inst.id, score, seed_scores });
    }
    Ok(out)
}

fn subset_size(budget_k: f64, total: usize) -> usize {
    (((budget_k / 100.0) * total as f64).round() as usize).clamp(1, total)
}

/// Pick the annotated subset for one budget. Ranked strategies take the
/// top-|S| by their ordering with lower-id tie-break; random sampling is
/// uniform per seed. k = 100 returns everything.
pub fn select(
    scores: Option<&[SelectionScore]>,
    all_ids: &[u64],
    strategy: SelectionStrategy,
    budget_k: f64,
    seed: u64,
) -> Result<Vec<u64>> {
    if all_ids.is_empty() {
        return Err(Error::InvalidValue {
            what: "select",
            details: "empty training set".into(),
        });
    }
    if !(budget_k > 0.0 && budget_k <= 100.0) {
        return Err(Error::InvalidValue {
            what: "select",
            details: format!("budget must be in (0, 100], got {budget_k}"),
        });
    }
    if budget_k == 100.0 {
        return Ok(all_ids.to_vec());
    }
    let size = subset_size(budget_k, all_ids.len());
    match strategy {
        SelectionStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ids = all_ids.to_vec();
            ids.shuffle(&mut rng);
            ids.truncate(size);
            ids.sort_unstable();
            Ok(ids)
        }
        ranked => {
            let scores = scores.ok_or(Error::InvalidValue {
                what: "select",
                details: "ranked strategies need scores".into(),
            })?;
            let mut order: Vec<&SelectionScore> = scores.iter().collect();
            let ascending = matches!(ranked, SelectionStrategy::Lc | SelectionStrategy::Lis);
            order.sort_by(|a, b| {
                let cmp = a
                    .score
                    .partial_cmp(&b.score)
                    .unwrap_or(std::cmp::Ordering::Equal);
                let cmp = if ascending { cmp } else { cmp.reverse() };
                cmp.then(a.instance_id.cmp(&b.instance_id))
            });
            let mut ids: Vec<u64> = order.iter().take(size).map(|s| s.instance_id).collect();
            ids.sort_unstable();
            Ok(ids)
        }
    }
}

/// Reproducibility manifest for one selection.
#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub strategy: String,
    pub k: f64,
    pub seed: u64,
    pub selected_ids: Vec<u64>,
}

impl SelectionManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), json)
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))
    }
}

/// Ordinary shuffled batching: a seeded random partition, last batch short.
pub fn plain_batches(total: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Batches where at least ceil(batch_size/3) instances carry rationales.
/// Annotated instances recycle with replacement once their shuffled pass is
/// exhausted; every instance (annotated or not) appears at least once per
/// epoch. When everything is annotated this degenerates to plain batching.
pub fn compose_batches(
    total: usize,
    annotated_idx: &[usize],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if annotated_idx.is_empty() {
        return Err(Error::InvalidValue {
            what: "compose_batches",
            details: "ER training needs at least one annotated instance".into(),
        });
    }
    let batch_size = batch_size.max(1);
    let annotated: Vec<usize> = annotated_idx.to_vec();
    let is_annotated = {
        let mut flags = vec![false; total];
        for &i in &annotated {
            flags[i] = true;
        }
        flags
    };
    let unannotated: Vec<usize> = (0..total).filter(|&i| !is_annotated[i]).collect();
    if unannotated.is_empty() {
        return Ok(plain_batches(total, batch_size, rng));
    }

    let quota = batch_size.div_ceil(3);
    let fill_cap = batch_size - quota;
    let n_batches = std::cmp::max(
        unannotated.len().div_ceil(fill_cap.max(1)),
        annotated.len().div_ceil(quota),
    )
    .max(1);

    let mut ann_pass = annotated.clone();
    ann_pass.shuffle(rng);
    let mut ann_cursor = 0usize;
    let mut next_annotated = |rng: &mut ChaCha8Rng| -> usize {
        if ann_cursor < ann_pass.len() {
            let v = ann_pass[ann_cursor];
            ann_cursor += 1;
            v
        } else {
            annotated[rng.gen_range(0..annotated.len())]
        }
    };

    let mut un_queue = unannotated.clone();
    un_queue.shuffle(rng);
    let mut un_cursor = 0usize;

    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..quota {
            batch.push(next_annotated(rng));
        }
        while batch.len() < batch_size {
            if un_cursor < un_queue.len() {
                batch.push(un_queue[un_cursor]);
                un_cursor += 1;
            } else {
                batch.push(next_annotated(rng));
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}
