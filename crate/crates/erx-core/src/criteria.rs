//! Rationale alignment criteria Φ(r̂, ṙ): the divergence between a machine
//! rationale (per-token probabilities in (0,1)) and a binary human rationale.
//!
//! Every criterion comes with an analytic gradient with respect to r̂ so the
//! training tape can treat a criterion as one fused differentiable node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriterionKind {
    Mse,
    Mae,
    Huber,
    /// Positive-term-only: −(1/n)·Σ ṙ_t·log(r̂_t).
    Bce,
    KlDiv,
    Order,
    /// Standard two-term BCE; an ablation variant enabled by the
    /// `bce_two_term` config flag, not part of the canonical six.
    #[serde(rename = "bce_two_term")]
    BceTwoTerm,
}

impl CriterionKind {
    /// The six canonical alignment criteria (sweeps iterate these).
    pub const ALL: [CriterionKind; 6] = [
        CriterionKind::Mse,
        CriterionKind::Mae,
        CriterionKind::Huber,
        CriterionKind::Bce,
        CriterionKind::KlDiv,
        CriterionKind::Order,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CriterionKind::Mse => "MSE",
            CriterionKind::Mae => "MAE",
            CriterionKind::Huber => "Huber",
            CriterionKind::Bce => "BCE",
            CriterionKind::KlDiv => "KLDiv",
            CriterionKind::Order => "Order",
            CriterionKind::BceTwoTerm => "BCE2",
        }
    }
}

impl std::str::FromStr for CriterionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(CriterionKind::Mse),
            "mae" => Ok(CriterionKind::Mae),
            "huber" => Ok(CriterionKind::Huber),
            "bce" => Ok(CriterionKind::Bce),
            "kldiv" | "kl" => Ok(CriterionKind::KlDiv),
            "order" => Ok(CriterionKind::Order),
            other => Err(Error::Config(format!("unknown criterion `{other}`"))),
        }
    }
}

fn check_lengths(op: &'static str, pred: &[f64], mask: &[u8]) -> Result<()> {
    if pred.is_empty() || pred.len() != mask.len() {
        return Err(Error::ShapeMismatch {
            op,
            details: format!("pred has {} entries, mask has {}", pred.len(), mask.len()),
        });
    }
    Ok(())
}

fn check_positive(op: &'static str, pred: &[f64]) -> Result<()> {
    for (t, &p) in pred.iter().enumerate() {
        if p.is_nan() || p <= 0.0 {
            return Err(Error::InvalidValue {
                what: op,
                details: format!("prob at token {t} is {p}, must be positive"),
            });
        }
    }
    Ok(())
}

/// Φ_MSE = (1/n)·‖r̂ − ṙ‖²
pub fn mse(pred: &[f64], mask: &[u8]) -> Result<f64> {
    check_lengths("mse", pred, mask)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(mask)
        .map(|(&p, &m)| (p - m as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Φ_MAE = (1/n)·Σ |r̂_t − ṙ_t|
pub fn mae(pred: &[f64], mask: &[u8]) -> Result<f64> {
    check_lengths("mae", pred, mask)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(mask)
        .map(|(&p, &m)| (p - m as f64).abs())
        .sum::<f64>()
        / n)
}

/// Aggregate-level Huber: ½·Φ_MSE when Φ_MAE < δ, else δ·(Φ_MAE − δ/2).
/// The branch condition is on the whole-vector MAE, not elementwise.
pub fn huber(pred: &[f64], mask: &[u8], delta: f64) -> Result<f64> {
    if delta <= 0.0 {
        return Err(Error::InvalidValue {
            what: "huber delta",
            details: format!("must be positive, got {delta}"),
        });
    }
    let mae_v = mae(pred, mask)?;
    if mae_v < delta {
        Ok(0.5 * mse(pred, mask)?)
    } else {
        Ok(delta * (mae_v - 0.5 * delta))
    }
}

/// Positive-term-only BCE: −(1/n)·Σ ṙ_t·log(r̂_t). The (1−ṙ)·log(1−r̂)
/// term is deliberately absent; `bce_two_term` offers it for ablation.
pub fn bce(pred: &[f64], mask: &[u8]) -> Result<f64> {
    check_lengths("bce", pred, mask)?;
    check_positive("bce", pred)?;
    let n = pred.len() as f64;
    Ok(-pred
        .iter()
        .zip(mask)
        .map(|(&p, &m)| m as f64 * p.ln())
        .sum::<f64>()
        / n)
}

/// Standard two-term BCE, off by default in every driver; kept for ablation.
pub fn bce_two_term(pred: &[f64], mask: &[u8]) -> Result<f64> {
    check_lengths("bce_two_term", pred, mask)?;
    let n = pred.len() as f64;
    let mut acc = 0.0;
    for (t, (&p, &m)) in pred.iter().zip(mask).enumerate() {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidValue {
                what: "bce_two_term",
                details: format!("prob at token {t} is {p}, must be in (0,1)"),
            });
        }
        acc += m as f64 * p.ln() + (1.0 - m as f64) * (1.0 - p).ln();
    }
    Ok(-acc / n)
}

/// Φ_KLDiv = (1/n)·Σ ṙ_t·log(ṙ_t / r̂_t) with 0·log(0/x) := 0.
/// For binary ṙ this equals Φ_BCE exactly.
pub fn kldiv(pred: &[f64], mask: &[u8]) -> Result<f64> {
    check_lengths("kldiv", pred, mask)?;
    check_positive("kldiv", pred)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(mask)
        .map(|(&p, &m)| if m == 1 { (1.0 / p).ln() } else { 0.0 })
        .sum::<f64>()
        / n)
}

/// Ranking criterion: Σ over important tokens of min(r̂_t / m − 1, 0)²,
/// where m is the largest unimportant probability. Zero exactly when every
/// important token's probability reaches m. Returns 0 when either group is
/// empty (no constraint is expressible).
pub fn order_loss(pred: &[f64], mask: &[u8]) -> Result<f64> {
    check_lengths("order", pred, mask)?;
    let max_unimportant = pred
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == 0)
        .map(|(&p, _)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    let any_important = mask.contains(&1);
    if !any_important || max_unimportant == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    Ok(pred
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == 1)
        .map(|(&p, _)| (p / max_unimportant - 1.0).min(0.0).powi(2))
        .sum())
}

/// Dispatch on kind. `delta` only affects Huber.
pub fn criterion_value(kind: CriterionKind, delta: f64, pred: &[f64], mask: &[u8]) -> Result<f64> {
    match kind {
        CriterionKind::Mse => mse(pred, mask),
        CriterionKind::Mae => mae(pred, mask),
        CriterionKind::Huber => huber(pred, mask, delta),
        CriterionKind::Bce => bce(pred, mask),
        CriterionKind::KlDiv => kldiv(pred, mask),
        CriterionKind::Order => order_loss(pred, mask),
        CriterionKind::BceTwoTerm => bce_two_term(pred, mask),
    }
}

/// ∂Φ/∂r̂ for each criterion. At the nondifferentiable points of MAE, Huber
/// and Order the subgradient used is documented inline.
pub fn criterion_grad(
    kind: CriterionKind,
    delta: f64,
    pred: &[f64],
    mask: &[u8],
) -> Result<Vec<f64>> {
    check_lengths("criterion_grad", pred, mask)?;
    let n = pred.len() as f64;
    let grad = match kind {
        CriterionKind::Mse => pred
            .iter()
            .zip(mask)
            .map(|(&p, &m)| 2.0 * (p - m as f64) / n)
            .collect(),
        CriterionKind::Mae => pred
            .iter()
            .zip(mask)
            .map(|(&p, &m)| (p - m as f64).signum() / n)
            .collect(),
        CriterionKind::Huber => {
            let mae_v = mae(pred, mask)?;
            if mae_v < delta {
                pred.iter()
                    .zip(mask)
                    .map(|(&p, &m)| (p - m as f64) / n)
                    .collect()
            } else {
                pred.iter()
                    .zip(mask)
                    .map(|(&p, &m)| delta * (p - m as f64).signum() / n)
                    .collect()
            }
        }
        CriterionKind::Bce | CriterionKind::KlDiv => {
            check_positive("criterion_grad", pred)?;
            pred.iter()
                .zip(mask)
                .map(|(&p, &m)| if m == 1 { -1.0 / (p * n) } else { 0.0 })
                .collect()
        }
        CriterionKind::BceTwoTerm => pred
            .iter()
            .zip(mask)
            .map(|(&p, &m)| {
                if m == 1 {
                    -1.0 / (p * n)
                } else {
                    1.0 / ((1.0 - p) * n)
                }
            })
            .collect(),
        CriterionKind::Order => {
            let mut grad = vec![0.0; pred.len()];
            // Ties in the unimportant max resolve to the lowest index.
            let mut arg_max: Option<usize> = None;
            for (t, (&p, &m)) in pred.iter().zip(mask).enumerate() {
                if m == 0 && arg_max.is_none_or(|j| p > pred[j]) {
                    arg_max = Some(t);
                }
            }
            let any_important = mask.contains(&1);
            let Some(j) = arg_max else { return Ok(grad) };
            if !any_important {
                return Ok(grad);
            }
            let m_val = pred[j];
            for (t, (&p, &msk)) in pred.iter().zip(mask).enumerate() {
                if msk == 1 && p < m_val {
                    let r = p / m_val - 1.0;
                    grad[t] += 2.0 * r / m_val;
                    grad[j] += -2.0 * r * p / (m_val * m_val);
                }
            }
            grad
        }
    };
    Ok(grad)
}

/// Mean per-instance Φ over the rationale-annotated slice of a batch.
/// Returns (mean Φ, annotated count); an empty annotated subset contributes
/// zero and is flagged by the zero count.
pub fn er_loss(
    pairs: &[(&[f64], &[u8])],
    kind: CriterionKind,
    delta: f64,
) -> Result<(f64, usize)> {
    if pairs.is_empty() {
        return Ok((0.0, 0));
    }
    let mut acc = 0.0;
    for (pred, mask) in pairs {
        acc += criterion_value(kind, delta, pred, mask)?;
    }
    Ok((acc / pairs.len() as f64, pairs.len()))
}
