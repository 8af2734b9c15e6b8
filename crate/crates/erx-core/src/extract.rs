//! Machine rationale extractors: per-token raw importance scores from a
//! forward trace, pushed through the shared sigmoid normalization
//! `probs = σ(γ · raw)`.
//!
//! Three families: input-times-gradient (IxG, signed, one backward pass per
//! instance), attention column means, and a learned linear head over the
//! input embeddings.

use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, ModelParams, TaskMode};
use crate::tensor::{Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    IxG,
    Attention,
    Learned,
}

impl ExtractorKind {
    pub const ALL: [ExtractorKind; 3] =
        [ExtractorKind::IxG, ExtractorKind::Attention, ExtractorKind::Learned];

    pub fn name(self) -> &'static str {
        match self {
            ExtractorKind::IxG => "IxG",
            ExtractorKind::Attention => "Attention",
            ExtractorKind::Learned => "Learned",
        }
    }
}

impl std::str::FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ixg" => Ok(ExtractorKind::IxG),
            "attention" => Ok(ExtractorKind::Attention),
            "learned" => Ok(ExtractorKind::Learned),
            other => Err(Error::Config(format!("unknown extractor `{other}`"))),
        }
    }
}

/// Per-token importance scores for one instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rationale {
    pub raw_scores: Vec<f64>,
    /// σ(γ·raw), elementwise; ordering always matches `raw_scores`.
    pub probs: Vec<f64>,
    pub target_class: usize,
    pub extractor: ExtractorKind,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn normalize(raw: Vec<f64>, gamma: f64, target_class: usize, extractor: ExtractorKind) -> Rationale {
    let probs = raw.iter().map(|&s| sigmoid(gamma * s)).collect();
    Rationale { raw_scores: raw, probs, target_class, extractor }
}

/// Gradient of the summed target-class logit(s) with respect to the input
/// embeddings, flattened [n·dim]. One target in sequence mode, one per token
/// in token mode.
pub fn input_logit_gradient(trace: &mut ForwardTrace, targets: &[usize]) -> Result<Vec<f64>> {
    let expected = match trace.mode {
        TaskMode::Sequence => 1,
        TaskMode::Token => trace.n,
    };
    if targets.len() != expected {
        return Err(Error::ShapeMismatch {
            op: "input_logit_gradient",
            details: format!("{} targets for mode expecting {expected}", targets.len()),
        });
    }
    let m = trace.n_classes;
    for &t in targets {
        if t >= m {
            return Err(Error::IndexOutOfRange { what: "class", got: t, limit: m });
        }
    }
    let mut one_hot = vec![0.0; trace.tape.value(trace.logits).numel()];
    for (row, &t) in targets.iter().enumerate() {
        one_hot[row * m + t] = 1.0;
    }
    let shape = trace.tape.value(trace.logits).shape().to_vec();
    let mask = trace.tape.leaf(Tensor::new(one_hot, shape)?);
    let picked = trace.tape.mul(trace.logits, mask)?;
    let scalar = trace.tape.sum(picked);
    trace.tape.zero_grads();
    trace.tape.backward(scalar)?;
    trace
        .tape
        .grad(trace.embeddings)
        .map(|g| g.to_vec())
        .ok_or(Error::InvalidValue {
            what: "input_logit_gradient",
            details: "no gradient reached the input embeddings".into(),
        })
}

/// IxG: raw score per token t is Σ_d (∂logit/∂e_{t,d})·e_{t,d}, signed and
/// summed over the embedding dimension.
pub fn extract_ixg(trace: &mut ForwardTrace, targets: &[usize], gamma: f64) -> Result<Rationale> {
    let grad = input_logit_gradient(trace, targets)?;
    let dim = grad.len() / trace.n;
    let e = trace.embeddings_value();
    let raw: Vec<f64> = (0..trace.n)
        .map(|t| {
            (0..dim)
                .map(|d| grad[t * dim + d] * e[t * dim + d])
                .sum()
        })
        .collect();
    Ok(normalize(raw, gamma, targets[0], ExtractorKind::IxG))
}

/// Attention: raw score per token is the mean over query rows of that
/// token's attention column; scores are nonnegative and sum to one.
pub fn extract_attention(trace: &ForwardTrace, target_class: usize, gamma: f64) -> Rationale {
    let n = trace.n;
    let att = trace.attention_value();
    let raw: Vec<f64> = (0..n)
        .map(|col| (0..n).map(|row| att[row * n + col]).sum::<f64>() / n as f64)
        .collect();
    normalize(raw, gamma, target_class, ExtractorKind::Attention)
}

/// Learned head: raw score per token is `head_w · e_t + head_b` over the
/// retained input embeddings.
pub fn extract_learned(params: &ModelParams, trace: &ForwardTrace, target_class: usize, gamma: f64) -> Result<Rationale> {
    let dim = params.cfg.embed_dim;
    if params.head_w.len() != dim {
        return Err(Error::ShapeMismatch {
            op: "extract_learned",
            details: format!("head has {} weights, embed_dim is {dim}", params.head_w.len()),
        });
    }
    let e = trace.embeddings_value();
    let raw: Vec<f64> = (0..trace.n)
        .map(|t| {
            params.head_w.iter().enumerate().map(|(d, &w)| w * e[t * dim + d]).sum::<f64>()
                + params.head_b[0]
        })
        .collect();
    Ok(normalize(raw, gamma, target_class, ExtractorKind::Learned))
}

/// Dispatch over extractor families. `targets` is the class (or per-token
/// classes) the rationale is computed with respect to: the supervision
/// target during ER training, the predicted class for post-hoc use.
pub fn extract(
    params: &ModelParams,
    trace: &mut ForwardTrace,
    kind: ExtractorKind,
    targets: &[usize],
    gamma: f64,
) -> Result<Rationale> {
    match kind {
        ExtractorKind::IxG => extract_ixg(trace, targets, gamma),
        ExtractorKind::Attention => Ok(extract_attention(trace, targets[0], gamma)),
        ExtractorKind::Learned => extract_learned(params, trace, targets[0], gamma),
    }
}

/// Differentiable rationale probabilities on the training tape. For IxG the
/// caller supplies the frozen input-embedding gradient from a probe pass;
/// gradients then flow through the embedding term only, keeping the
/// training backward first-order. Attention and learned probs are ordinary
/// forward quantities and differentiate through the full model path.
pub fn training_probs_node(
    trace: &mut ForwardTrace,
    kind: ExtractorKind,
    gamma: f64,
    frozen_ixg: Option<&[f64]>,
) -> Result<TensorId> {
    let n = trace.n;
    let raw = match kind {
        ExtractorKind::IxG => {
            let grad = frozen_ixg.ok_or(Error::InvalidValue {
                what: "training_probs_node",
                details: "IxG requires the frozen input gradient".into(),
            })?;
            let dim = grad.len() / n;
            let g = trace.tape.leaf(Tensor::new(grad.to_vec(), vec![n, dim])?);
            let prod = trace.tape.mul(g, trace.embeddings)?;
            let ones = trace.tape.leaf(Tensor::new(vec![1.0; dim], vec![dim, 1])?);
            let rows = trace.tape.matmul(prod, ones)?;
            trace.tape.reshape(rows, &[n])?
        }
        ExtractorKind::Attention => {
            let mean_row = trace.tape.leaf(Tensor::new(vec![1.0 / n as f64; n], vec![1, n])?);
            let cols = trace.tape.matmul(mean_row, trace.attention)?;
            trace.tape.reshape(cols, &[n])?
        }
        ExtractorKind::Learned => {
            let scores = trace.tape.matmul(trace.embeddings, trace.params.head_w)?;
            let biased = trace.tape.add(scores, trace.params.head_b)?;
            trace.tape.reshape(biased, &[n])?
        }
    };
    let scaled = trace.tape.scale(raw, gamma);
    Ok(trace.tape.sigmoid(scaled))
}

/// Binarized rationale for reporting: ones at the ceil(k%·n) largest probs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinaryRationale {
    pub mask: Vec<u8>,
    pub k_percent: f64,
}

/// Top-k% thresholding; ties break toward the lower index.
pub fn binarize_topk(r: &Rationale, k_percent: f64) -> Result<BinaryRationale> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidValue {
            what: "binarize_topk",
            details: format!("k must be in (0, 100], got {k_percent}"),
        });
    }
    let n = r.probs.len();
    let ones = ((k_percent / 100.0) * n as f64).ceil() as usize;
    let ones = ones.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        r.probs[b]
            .partial_cmp(&r.probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mask = vec![0u8; n];
    for &idx in order.iter().take(ones) {
        mask[idx] = 1;
    }
    Ok(BinaryRationale { mask, k_percent })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RationaleRecord {
    pub instance_id: u64,
    pub extractor: String,
    pub target_class: usize,
    pub raw_scores: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Export rationales as JSONL, one record per instance.
pub fn write_rationales_jsonl(
    path: impl AsRef<Path>,
    items: &[(u64, Rationale)],
) -> Result<()> {
    let path = path.as_ref();
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for (id, r) in items {
        let record = RationaleRecord {
            instance_id: *id,
            extractor: r.extractor.name().to_string(),
            target_class: r.target_class,
            raw_scores: r.raw_scores.clone(),
            probs: r.probs.clone(),
        };
        serde_json::to_writer(&mut file, &record)?;
        file.write_all(b"\n")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams, TaskMode};

    fn tiny_params(seed: u64) -> ModelParams {
        ModelParams::init(ModelConfig::new(7, 4, 2, TaskMode::Sequence), seed)
    }

    #[test]
    fn single_token_attention_is_one() {
        let params = tiny_params(0);
        let trace = params.forward(&[3]).unwrap();
        assert_eq!(trace.attention_value(), &[1.0]);
        let r = extract_attention(&trace, 0, 100.0);
        assert_eq!(r.raw_scores, vec![1.0]);
        assert!(r.probs[0] > 0.999999);
    }

    #[test]
    fn uniform_attention_gives_equal_scores() {
        let mut params = tiny_params(0);
        // Zero query/key projections make every attention row uniform.
        params.w_query.iter_mut().for_each(|w| *w = 0.0);
        params.w_key.iter_mut().for_each(|w| *w = 0.0);
        let trace = params.forward(&[1, 2, 3]).unwrap();
        let r = extract_attention(&trace, 0, 100.0);
        for &s in &r.raw_scores {
            assert!((s - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_column_means_hand_computed() {
        // Column means of a fixed 3×3 row-stochastic matrix.
        let att = [0.5, 0.3, 0.2, 0.1, 0.8, 0.1, 0.2, 0.2, 0.6];
        let n = 3;
        let means: Vec<f64> = (0..n)
            .map(|c| (0..n).map(|r| att[r * n + c]).sum::<f64>() / n as f64)
            .collect();
        let want = [0.26666666666666666, 0.43333333333333335, 0.3];
        for (m, w) in means.iter().zip(want) {
            assert!((m - w).abs() < 1e-12);
        }
        // The full-trace path agrees with the column-mean identity: scores
        // are nonnegative and sum to 1.
        let params = tiny_params(3);
        let trace = params.forward(&[1, 2, 3]).unwrap();
        let r = extract_attention(&trace, 0, 100.0);
        let total: f64 = r.raw_scores.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(r.raw_scores.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn zero_embedding_token_has_zero_ixg_score() {
        let mut params = tiny_params(1);
        let d = params.cfg.embed_dim;
        for i in 0..d {
            params.embedding[2 * d + i] = 0.0;
        }
        let mut trace = params.forward(&[1, 2, 3]).unwrap();
        let r = extract_ixg(&mut trace, &[0], 100.0).unwrap();
        assert_eq!(r.raw_scores[1], 0.0);
        assert!((r.probs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_head_gives_half_probs_and_finite_heads_stay_inside_unit_interval() {
        let params = tiny_params(2);
        let trace = params.forward(&[1, 2]).unwrap();
        let r = extract_learned(&params, &trace, 0, 100.0).unwrap();
        assert!(r.probs.iter().all(|&p| (p - 0.5).abs() < 1e-12));

        let mut params = tiny_params(2);
        params.head_w = vec![5.0, -3.0, 0.0, 11.0];
        params.head_b = vec![0.25];
        let trace = params.forward(&[1, 2, 3]).unwrap();
        // Moderate gamma keeps the sigmoid away from f64 saturation.
        let r = extract_learned(&params, &trace, 0, 1.0).unwrap();
        assert!(r.probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn learned_head_reads_planted_bit() {
        let mut params = tiny_params(4);
        let d = params.cfg.embed_dim;
        // Plant dimension 0 as a signal bit: on for tokens 1 and 2.
        for tok in 0..params.cfg.vocab_size {
            params.embedding[tok * d] = if tok == 1 || tok == 2 { 1.0 } else { 0.0 };
        }
        params.head_w = vec![0.0; d];
        params.head_w[0] = 1.0;
        let trace = params.forward(&[3, 1, 4, 2]).unwrap();
        let r = extract_learned(&params, &trace, 0, 100.0).unwrap();
        assert!(r.raw_scores[1] > r.raw_scores[0]);
        assert!(r.raw_scores[1] > r.raw_scores[2]);
        assert!(r.raw_scores[3] > r.raw_scores[2]);
    }

    #[test]
    fn ranking_is_invariant_to_gamma() {
        let params = tiny_params(5);
        let mut trace = params.forward(&[1, 2, 3, 4]).unwrap();
        let r1 = extract_ixg(&mut trace, &[1], 1.0).unwrap();
        let mut trace = params.forward(&[1, 2, 3, 4]).unwrap();
        let r2 = extract_ixg(&mut trace, &[1], 100.0).unwrap();
        let rank = |xs: &[f64]| {
            let mut idx: Vec<usize> = (0..xs.len()).collect();
            idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
            idx
        };
        assert_eq!(rank(&r1.raw_scores), rank(&r1.probs));
        assert_eq!(rank(&r1.probs), rank(&r2.probs));
    }

    #[test]
    fn binarize_examples() {
        let r = Rationale {
            raw_scores: vec![0.0; 3],
            probs: vec![0.9, 0.1, 0.5],
            target_class: 0,
            extractor: ExtractorKind::IxG,
        };
        assert_eq!(binarize_topk(&r, 100.0).unwrap().mask, vec![1, 1, 1]);
        // ceil(0.33·3) = 1 one; ceil(0.34·3) = 2 ones.
        assert_eq!(binarize_topk(&r, 33.0).unwrap().mask, vec![1, 0, 0]);
        assert_eq!(binarize_topk(&r, 34.0).unwrap().mask, vec![1, 0, 1]);
        let tie = Rationale {
            raw_scores: vec![0.0; 2],
            probs: vec![0.5, 0.5],
            target_class: 0,
            extractor: ExtractorKind::IxG,
        };
        assert_eq!(binarize_topk(&tie, 50.0).unwrap().mask, vec![1, 0]);
        assert!(binarize_topk(&tie, 0.0).is_err());
        assert!(binarize_topk(&tie, 101.0).is_err());
    }

    #[test]
    fn extraction_is_deterministic() {
        let params = tiny_params(6);
        let run = || {
            let mut trace = params.forward(&[5, 1, 2]).unwrap();
            extract_ixg(&mut trace, &[0], 100.0).unwrap().raw_scores
        };
        assert_eq!(run(), run());
    }
}
