//! Evaluation metrics: task accuracy and macro F1, contrast-set
//! consistency, functional-test failure rates with min-max normalization
//! across compared models, per-group false-positive-rate disparity, and the
//! one-sided Welch t-test used for significance flags.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

pub fn accuracy(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != gold.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            details: format!("{} predictions vs {} gold", predictions.len(), gold.len()),
        });
    }
    let correct = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / gold.len() as f64)
}

/// Unweighted mean of per-class F1. Classes absent from both gold and
/// predictions are excluded; a class present on one side only counts with
/// F1 = 0.
pub fn macro_f1(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != gold.len() {
        return Err(Error::ShapeMismatch {
            op: "macro_f1",
            details: format!("{} predictions vs {} gold", predictions.len(), gold.len()),
        });
    }
    let classes: BTreeSet<usize> = gold.iter().chain(predictions).copied().collect();
    let mut f1_sum = 0.0;
    for &c in &classes {
        let tp = predictions
            .iter()
            .zip(gold)
            .filter(|&(&p, &g)| p == c && g == c)
            .count() as f64;
        let fp = predictions
            .iter()
            .zip(gold)
            .filter(|&(&p, &g)| p == c && g != c)
            .count() as f64;
        let fn_ = predictions
            .iter()
            .zip(gold)
            .filter(|&(&p, &g)| p != c && g == c)
            .count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        f1_sum += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    Ok(f1_sum / classes.len() as f64)
}

/// One contrast group: an original instance plus its perturbed copies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastGroup {
    pub original_id: u64,
    pub original_gold: usize,
    /// (instance id, gold label, perturbation kind)
    pub contrasts: Vec<(u64, usize, String)>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContrastReport {
    pub original_acc: f64,
    pub contrast_acc: f64,
    /// Fraction of groups where the original and every contrast are correct.
    pub consistency: f64,
}

pub fn contrast_consistency(
    groups: &[ContrastGroup],
    predictions: &BTreeMap<u64, usize>,
) -> Result<ContrastReport> {
    if groups.is_empty() {
        return Err(Error::InvalidValue {
            what: "contrast_consistency",
            details: "no contrast groups".into(),
        });
    }
    let lookup = |id: u64| -> Result<usize> {
        predictions.get(&id).copied().ok_or(Error::InvalidValue {
            what: "contrast_consistency",
            details: format!("missing prediction for instance {id}"),
        })
    };
    let mut orig_correct = 0usize;
    let mut contrast_correct = 0usize;
    let mut contrast_total = 0usize;
    let mut fully_correct = 0usize;
    for g in groups {
        if g.contrasts.is_empty() {
            return Err(Error::InvalidValue {
                what: "contrast_consistency",
                details: format!("group {} has no contrasts", g.original_id),
            });
        }
        let orig_ok = lookup(g.original_id)? == g.original_gold;
        orig_correct += orig_ok as usize;
        let mut all_ok = orig_ok;
        for (id, gold, _) in &g.contrasts {
            let ok = lookup(*id)? == *gold;
            contrast_correct += ok as usize;
            contrast_total += 1;
            all_ok &= ok;
        }
        fully_correct += all_ok as usize;
    }
    Ok(ContrastReport {
        original_acc: orig_correct as f64 / groups.len() as f64,
        contrast_acc: contrast_correct as f64 / contrast_total as f64,
        consistency: fully_correct as f64 / groups.len() as f64,
    })
}

/// Fraction of instances predicted incorrectly.
pub fn failure_rate(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    Ok(1.0 - accuracy(predictions, gold)?)
}

/// Min-max scale one subtest's failure rates across the compared models.
/// All-equal rates map to all zeros.
pub fn normalize_failure_rates(rates: &[f64]) -> Result<Vec<f64>> {
    if rates.len() < 2 {
        return Err(Error::InvalidValue {
            what: "normalize_failure_rates",
            details: "normalization needs at least two models".into(),
        });
    }
    let min = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.0; rates.len()]);
    }
    Ok(rates.iter().map(|r| (r - min) / (max - min)).collect())
}

/// One row of a prediction table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub instance_id: u64,
    pub gold: usize,
    pub pred: usize,
    pub split: String,
    pub group_tags: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FprdReport {
    pub value: f64,
    pub overall_fpr: f64,
    pub per_group: BTreeMap<String, f64>,
    /// Groups dropped for having no gold-negative instances.
    pub excluded_groups: Vec<String>,
}

/// False-positive-rate disparity: Σ_z |FPR_z − FPR_overall| over identifier
/// groups, with class 1 as the positive class. Groups without any
/// gold-negative instance are excluded and flagged.
pub fn fprd(rows: &[PredictionRow]) -> Result<FprdReport> {
    let fpr_of = |subset: &[&PredictionRow]| -> Option<f64> {
        let negatives: Vec<&&PredictionRow> = subset.iter().filter(|r| r.gold == 0).collect();
        if negatives.is_empty() {
            return None;
        }
        let fp = negatives.iter().filter(|r| r.pred == 1).count();
        Some(fp as f64 / negatives.len() as f64)
    };
    let all: Vec<&PredictionRow> = rows.iter().collect();
    let overall = fpr_of(&all).ok_or(Error::InvalidValue {
        what: "fprd",
        details: "no gold-negative instances overall".into(),
    })?;
    let groups: BTreeSet<String> = rows
        .iter()
        .flat_map(|r| r.group_tags.iter().cloned())
        .collect();
    let mut per_group = BTreeMap::new();
    let mut excluded = Vec::new();
    let mut total = 0.0;
    for g in groups {
        let members: Vec<&PredictionRow> =
            rows.iter().filter(|r| r.group_tags.contains(&g)).collect();
        match fpr_of(&members) {
            Some(f) => {
                total += (f - overall).abs();
                per_group.insert(g, f);
            }
            None => excluded.push(g),
        }
    }
    Ok(FprdReport { value: total, overall_fpr: overall, per_group, excluded_groups: excluded })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    /// One-sided p for the alternative "mean of a exceeds mean of b".
    pub p_value: f64,
    pub significant: bool,
}

pub const SIGNIFICANCE_ALPHA: f64 = 0.05;

/// Unpaired Welch's t-test, one-sided (alternative: mean(a) > mean(b)).
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<SignificanceResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidValue {
            what: "welch_t_test",
            details: format!("need at least two values per sample, got {} and {}", a.len(), b.len()),
        });
    }
    let (ma, va) = stats::mean_var(a);
    let (mb, vb) = stats::mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Err(Error::InvalidValue {
            what: "welch_t_test",
            details: "both samples have zero variance; the statistic is undefined".into(),
        });
    }
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let sa = va / na;
    let sb = vb / nb;
    let se = (sa + sb).sqrt();
    let t = (ma - mb) / se;
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p_value = stats::student_t_sf(t, df);
    Ok(SignificanceResult { t, df, p_value, significant: p_value < SIGNIFICANCE_ALPHA })
}

/// Prediction table CSV: instance_id, gold, pred, split, group_tags
/// (pipe-joined).
pub fn write_prediction_csv(path: impl AsRef<Path>, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["instance_id", "gold", "pred", "split", "group_tags"])?;
    for r in rows {
        w.write_record([
            r.instance_id.to_string(),
            r.gold.to_string(),
            r.pred.to_string(),
            r.split.clone(),
            r.group_tags.join("|"),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    Ok(())
}

pub fn read_prediction_csv(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let parse = |i: usize| -> Result<usize> {
            record
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or(Error::InvalidValue {
                    what: "prediction csv",
                    details: format!("bad field {i} in {record:?}"),
                })
        };
        rows.push(PredictionRow {
            instance_id: parse(0)? as u64,
            gold: parse(1)?,
            pred: parse(2)?,
            split: record.get(3).unwrap_or("").to_string(),
            group_tags: record
                .get(4)
                .filter(|s| !s.is_empty())
                .map(|s| s.split('|').map(String::from).collect())
                .unwrap_or_default(),
        });
    }
    Ok(rows)
}
