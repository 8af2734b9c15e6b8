//! The classifier under study: embedding → single-head self-attention →
//! linear classifier, in sequence mode (one label per input) or token mode
//! (one label per token). The forward pass retains the attention matrix and
//! the input embeddings on the tape so rationale extractors can read them.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::criteria::CriterionKind;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::extract::{self, ExtractorKind};
use crate::selection;
use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    #[default]
    Sequence,
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub mode: TaskMode,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, embed_dim: usize, n_classes: usize, mode: TaskMode) -> Self {
        ModelConfig { vocab_size, embed_dim, n_classes, mode, max_len: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub seed: u64,
    pub embedding: Vec<f64>, // [vocab, dim]
    pub w_query: Vec<f64>,   // [dim, dim]
    pub w_key: Vec<f64>,     // [dim, dim]
    pub w_value: Vec<f64>,   // [dim, dim]
    pub w_out: Vec<f64>,     // [dim, classes]
    pub b_out: Vec<f64>,     // [classes]
    /// Learned-extractor head: one score per token from its embedding.
    pub head_w: Vec<f64>, // [dim]
    pub head_b: Vec<f64>, // [1]
}

impl ModelParams {
    /// Seeded uniform init; classifier bias and extractor head start at zero.
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim as f64;
        let mut uniform = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
        };
        let emb_scale = 0.5 / d.sqrt();
        let mat_scale = 1.0 / d.sqrt();
        ModelParams {
            embedding: uniform(cfg.vocab_size * cfg.embed_dim, emb_scale),
            w_query: uniform(cfg.embed_dim * cfg.embed_dim, mat_scale),
            w_key: uniform(cfg.embed_dim * cfg.embed_dim, mat_scale),
            w_value: uniform(cfg.embed_dim * cfg.embed_dim, mat_scale),
            w_out: uniform(cfg.embed_dim * cfg.n_classes, mat_scale),
            b_out: vec![0.0; cfg.n_classes],
            head_w: vec![0.0; cfg.embed_dim],
            head_b: vec![0.0; 1],
            cfg,
            seed,
        }
    }

    pub fn all_finite(&self) -> bool {
        [
            &self.embedding,
            &self.w_query,
            &self.w_key,
            &self.w_value,
            &self.w_out,
            &self.b_out,
            &self.head_w,
            &self.head_b,
        ]
        .iter()
        .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// One forward pass, recorded on a fresh tape.
    pub fn forward(&self, token_ids: &[usize]) -> Result<ForwardTrace> {
        let cfg = &self.cfg;
        if token_ids.is_empty() {
            return Err(Error::InvalidValue {
                what: "forward",
                details: "empty token sequence".into(),
            });
        }
        if token_ids.len() > cfg.max_len {
            return Err(Error::InvalidValue {
                what: "forward",
                details: format!("sequence length {} exceeds max_len {}", token_ids.len(), cfg.max_len),
            });
        }
        let n = token_ids.len();
        let d = cfg.embed_dim;
        let m = cfg.n_classes;

        let mut tape = Tape::new();
        let embedding = tape.leaf(Tensor::new(self.embedding.clone(), vec![cfg.vocab_size, d])?);
        let w_query = tape.leaf(Tensor::new(self.w_query.clone(), vec![d, d])?);
        let w_key = tape.leaf(Tensor::new(self.w_key.clone(), vec![d, d])?);
        let w_value = tape.leaf(Tensor::new(self.w_value.clone(), vec![d, d])?);
        let w_out = tape.leaf(Tensor::new(self.w_out.clone(), vec![d, m])?);
        let b_out = tape.leaf(Tensor::new(self.b_out.clone(), vec![m])?);
        let head_w = tape.leaf(Tensor::new(self.head_w.clone(), vec![d, 1])?);
        let head_b = tape.leaf(Tensor::new(self.head_b.clone(), vec![1])?);

        let e = tape.embedding_lookup(embedding, token_ids)?;
        let q = tape.matmul(e, w_query)?;
        let k = tape.matmul(e, w_key)?;
        let v = tape.matmul(e, w_value)?;
        let k_t = tape.transpose(k)?;
        let scores = tape.matmul(q, k_t)?;
        let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attention = tape.softmax(scaled)?;
        let ctx = tape.matmul(attention, v)?;

        let logits = match cfg.mode {
            TaskMode::Sequence => {
                let pool = tape.leaf(Tensor::new(vec![1.0 / n as f64; n], vec![1, n])?);
                let pooled = tape.matmul(pool, ctx)?;
                let raw = tape.matmul(pooled, w_out)?;
                let biased = tape.add(raw, b_out)?;
                tape.reshape(biased, &[m])?
            }
            TaskMode::Token => {
                let raw = tape.matmul(ctx, w_out)?;
                tape.add(raw, b_out)?
            }
        };

        let logits_value = tape.value(logits).data().to_vec();
        let attention_value = tape.value(attention).data().to_vec();
        let embeddings_value = tape.value(e).data().to_vec();
        Ok(ForwardTrace {
            tape,
            params: ParamIds { embedding, w_query, w_key, w_value, w_out, b_out, head_w, head_b },
            embeddings: e,
            attention,
            logits,
            n,
            n_classes: m,
            mode: cfg.mode,
            logits_value,
            attention_value,
            embeddings_value,
        })
    }
}

/// Tape ids of the parameter leaves inside one forward trace.
#[derive(Debug, Clone, Copy)]
pub struct ParamIds {
    pub embedding: TensorId,
    pub w_query: TensorId,
    pub w_key: TensorId,
    pub w_value: TensorId,
    pub w_out: TensorId,
    pub b_out: TensorId,
    pub head_w: TensorId,
    pub head_b: TensorId,
}

pub struct ForwardTrace {
    pub tape: Tape,
    pub params: ParamIds,
    /// Input embeddings [n, dim], retained for gradient attribution.
    pub embeddings: TensorId,
    /// Row-stochastic attention matrix [n, n].
    pub attention: TensorId,
    /// [classes] in sequence mode, [n, classes] in token mode.
    pub logits: TensorId,
    pub n: usize,
    pub n_classes: usize,
    pub mode: TaskMode,
    logits_value: Vec<f64>,
    attention_value: Vec<f64>,
    embeddings_value: Vec<f64>,
}

pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

impl ForwardTrace {
    pub fn logits_value(&self) -> &[f64] {
        &self.logits_value
    }

    pub fn attention_value(&self) -> &[f64] {
        &self.attention_value
    }

    pub fn embeddings_value(&self) -> &[f64] {
        &self.embeddings_value
    }

    /// Softmax over the sequence-mode logits.
    pub fn class_probabilities(&self) -> Vec<f64> {
        let max = self.logits_value.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.logits_value.iter().map(|&x| (x - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / denom).collect()
    }

    /// Argmax prediction; ties break toward the lowest class index.
    pub fn predicted_class(&self) -> usize {
        debug_assert_eq!(self.mode, TaskMode::Sequence);
        argmax_lowest(&self.logits_value)
    }

    pub fn predicted_token_classes(&self) -> Vec<usize> {
        self.logits_value
            .chunks(self.n_classes)
            .map(argmax_lowest)
            .collect()
    }
}

/// One instance prepared for the training loop.
#[derive(Debug, Clone)]
pub struct EncodedInstance {
    pub id: u64,
    pub token_ids: Vec<usize>,
    /// One target in sequence mode, one per token in token mode.
    pub targets: Vec<usize>,
    /// Human rationale visible to this run (budget already applied).
    pub rationale: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // 0.3 is the plain-SGD rate at which the toy model reliably leaves
        // its init plateau; smaller published fine-tuning rates stall here.
        TrainConfig {
            lr: 0.3,
            batch_size: 32,
            max_epochs: 25,
            patience: 10,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

/// ER branch settings; `lambda == 0` disables the branch entirely.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErSettings {
    pub extractor: ExtractorKind,
    pub criterion: CriterionKind,
    pub huber_delta: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl ErSettings {
    pub fn active(er: Option<&ErSettings>) -> bool {
        er.is_some_and(|e| e.lambda > 0.0)
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    /// Mean Φ over the annotated slice, before the λ weight.
    pub er: f64,
    pub annotated: usize,
}

impl LossBreakdown {
    pub fn total(&self, lambda: f64) -> f64 {
        self.task + lambda * self.er
    }
}

struct ParamGrads {
    embedding: Vec<f64>,
    w_query: Vec<f64>,
    w_key: Vec<f64>,
    w_value: Vec<f64>,
    w_out: Vec<f64>,
    b_out: Vec<f64>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
}

impl ParamGrads {
    fn zeros(cfg: &ModelConfig) -> Self {
        ParamGrads {
            embedding: vec![0.0; cfg.vocab_size * cfg.embed_dim],
            w_query: vec![0.0; cfg.embed_dim * cfg.embed_dim],
            w_key: vec![0.0; cfg.embed_dim * cfg.embed_dim],
            w_value: vec![0.0; cfg.embed_dim * cfg.embed_dim],
            w_out: vec![0.0; cfg.embed_dim * cfg.n_classes],
            b_out: vec![0.0; cfg.n_classes],
            head_w: vec![0.0; cfg.embed_dim],
            head_b: vec![0.0; 1],
        }
    }

    fn accumulate(&mut self, trace: &ForwardTrace) {
        let pairs: [(&mut Vec<f64>, TensorId); 8] = [
            (&mut self.embedding, trace.params.embedding),
            (&mut self.w_query, trace.params.w_query),
            (&mut self.w_key, trace.params.w_key),
            (&mut self.w_value, trace.params.w_value),
            (&mut self.w_out, trace.params.w_out),
            (&mut self.b_out, trace.params.b_out),
            (&mut self.head_w, trace.params.head_w),
            (&mut self.head_b, trace.params.head_b),
        ];
        for (buf, id) in pairs {
            if let Some(g) = trace.tape.grad(id) {
                for (acc, &v) in buf.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }
}

fn param_slots<'a>(p: &'a mut ModelParams, g: &'a ParamGrads) -> [(&'a mut Vec<f64>, &'a Vec<f64>); 8] {
    [
        (&mut p.embedding, &g.embedding),
        (&mut p.w_query, &g.w_query),
        (&mut p.w_key, &g.w_key),
        (&mut p.w_value, &g.w_value),
        (&mut p.w_out, &g.w_out),
        (&mut p.b_out, &g.b_out),
        (&mut p.head_w, &g.head_w),
        (&mut p.head_b, &g.head_b),
    ]
}

pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    adam_m: Option<ParamGrads>,
    adam_v: Option<ParamGrads>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, cfg: &ModelConfig) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (None, None),
            OptimizerKind::Adam => (Some(ParamGrads::zeros(cfg)), Some(ParamGrads::zeros(cfg))),
        };
        Optimizer { kind, lr, adam_m: m, adam_v: v, step_count: 0 }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads) {
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in param_slots(params, grads) {
                    for (w, &d) in p.iter_mut().zip(g) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let t = self.step_count as i32;
                let m_hat_c = 1.0 - B1.powi(t);
                let v_hat_c = 1.0 - B2.powi(t);
                let m_state = self.adam_m.as_mut().unwrap();
                let v_state = self.adam_v.as_mut().unwrap();
                let m_slots = param_slots_mutpair(m_state);
                let v_slots = param_slots_mutpair(v_state);
                let p_slots = param_slots(params, grads);
                for (((p, g), m), v) in p_slots.into_iter().zip(m_slots).zip(v_slots) {
                    for i in 0..p.len() {
                        m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                        v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                        let m_hat = m[i] / m_hat_c;
                        let v_hat = v[i] / v_hat_c;
                        p[i] -= self.lr * m_hat / (v_hat.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

fn param_slots_mutpair(g: &mut ParamGrads) -> [&mut Vec<f64>; 8] {
    [
        &mut g.embedding,
        &mut g.w_query,
        &mut g.w_key,
        &mut g.w_value,
        &mut g.w_out,
        &mut g.b_out,
        &mut g.head_w,
        &mut g.head_b,
    ]
}

/// One gradient-descent update on L = L_task + λ·L_ER over a batch.
/// The ER term is the mean criterion over the rationale-annotated slice;
/// batches without any annotated instance contribute task loss only and
/// report `annotated == 0`.
pub fn train_step(
    params: &mut ModelParams,
    batch: &[EncodedInstance],
    er: Option<&ErSettings>,
    optimizer: &mut Optimizer,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidValue {
            what: "train_step",
            details: "empty batch".into(),
        });
    }
    let er_active = ErSettings::active(er);
    let annotated_count = if er_active {
        batch.iter().filter(|b| b.rationale.is_some()).count()
    } else {
        0
    };

    let mut grads = ParamGrads::zeros(&params.cfg);
    let mut task_acc = 0.0;
    let mut er_acc = 0.0;
    let batch_w = 1.0 / batch.len() as f64;

    for inst in batch {
        let use_er = er_active && inst.rationale.is_some();
        // IxG feeds the frozen input-embedding gradient of the target logit
        // back into the graph; computed on its own tape so the training
        // backward stays first-order.
        let frozen_ixg = if use_er && er.unwrap().extractor == ExtractorKind::IxG {
            let mut probe = params.forward(&inst.token_ids)?;
            Some(extract::input_logit_gradient(&mut probe, &inst.targets)?)
        } else {
            None
        };

        let mut trace = params.forward(&inst.token_ids)?;
        let ce = trace.tape.cross_entropy(trace.logits, &inst.targets)?;
        task_acc += trace.tape.value(ce).item();
        let mut loss = trace.tape.scale(ce, batch_w);

        if use_er {
            let er_cfg = er.unwrap();
            let probs = extract::training_probs_node(
                &mut trace,
                er_cfg.extractor,
                er_cfg.gamma,
                frozen_ixg.as_deref(),
            )?;
            let mask = inst.rationale.as_ref().unwrap();
            let phi = trace
                .tape
                .criterion(probs, mask, er_cfg.criterion, er_cfg.huber_delta)?;
            er_acc += trace.tape.value(phi).item();
            let weighted = trace
                .tape
                .scale(phi, er_cfg.lambda / annotated_count as f64);
            loss = trace.tape.add(loss, weighted)?;
        }

        trace.tape.backward(loss)?;
        grads.accumulate(&trace);
    }

    let breakdown = LossBreakdown {
        task: task_acc * batch_w,
        er: if annotated_count > 0 { er_acc / annotated_count as f64 } else { 0.0 },
        annotated: annotated_count,
    };
    let lambda = er.map_or(0.0, |e| e.lambda);
    if !breakdown.total(lambda).is_finite() {
        return Err(Error::NonFinite {
            context: "train_step",
            details: format!("task={} er={}", breakdown.task, breakdown.er),
        });
    }

    optimizer.step(params, &grads);
    if !params.all_finite() {
        return Err(Error::NonFinite {
            context: "parameter update",
            details: "weights left the finite range".into(),
        });
    }
    Ok(breakdown)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_task: f64,
    pub train_er: f64,
    pub dev_task: f64,
    pub dev_er: f64,
    pub dev_total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Task + λ·ER loss over a dataset, forward-only (used for dev-set early
/// stopping). ER probs come from the same extractor formulas as training.
pub fn dataset_loss(
    params: &ModelParams,
    data: &[EncodedInstance],
    er: Option<&ErSettings>,
) -> Result<(f64, f64)> {
    let mut task = 0.0;
    let mut er_sum = 0.0;
    let mut annotated = 0usize;
    let er_active = ErSettings::active(er);
    for inst in data {
        let mut trace = params.forward(&inst.token_ids)?;
        let ce = trace.tape.cross_entropy(trace.logits, &inst.targets)?;
        task += trace.tape.value(ce).item();
        if er_active {
            if let Some(mask) = &inst.rationale {
                let er_cfg = er.unwrap();
                let r = extract::extract(params, &mut trace, er_cfg.extractor, &inst.targets, er_cfg.gamma)?;
                er_sum += crate::criteria::criterion_value(
                    er_cfg.criterion,
                    er_cfg.huber_delta,
                    &r.probs,
                    mask,
                )?;
                annotated += 1;
            }
        }
    }
    let task = task / data.len() as f64;
    let er_mean = if annotated > 0 { er_sum / annotated as f64 } else { 0.0 };
    Ok((task, er_mean))
}

/// Train with early stopping on total dev loss; returns the checkpoint with
/// the lowest recorded dev loss and the per-epoch log.
pub fn fit(
    mut params: ModelParams,
    train: &[EncodedInstance],
    dev: &[EncodedInstance],
    er: Option<&ErSettings>,
    cfg: &TrainConfig,
    shuffle_seed: u64,
) -> Result<(ModelParams, TrainingLog)> {
    if dev.is_empty() {
        return Err(Error::InvalidValue {
            what: "fit",
            details: "dev set must be nonempty".into(),
        });
    }
    let lambda = er.map_or(0.0, |e| e.lambda);
    let er_active = ErSettings::active(er);
    let annotated_idx: Vec<usize> = train
        .iter()
        .enumerate()
        .filter(|(_, inst)| inst.rationale.is_some())
        .map(|(i, _)| i)
        .collect();
    if er_active && annotated_idx.is_empty() {
        return Err(Error::InvalidValue {
            what: "fit",
            details: "ER is enabled but no training instance carries a rationale".into(),
        });
    }

    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, &params.cfg);
    let mut log = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut stale = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        let batches = if er_active {
            selection::compose_batches(train.len(), &annotated_idx, cfg.batch_size, &mut rng)?
        } else {
            selection::plain_batches(train.len(), cfg.batch_size, &mut rng)
        };

        let mut task_acc = 0.0;
        let mut er_acc = 0.0;
        let mut er_batches = 0usize;
        for batch_idx in &batches {
            let batch: Vec<EncodedInstance> =
                batch_idx.iter().map(|&i| train[i].clone()).collect();
            let breakdown = train_step(&mut params, &batch, er, &mut optimizer)?;
            task_acc += breakdown.task;
            if breakdown.annotated > 0 {
                er_acc += breakdown.er;
                er_batches += 1;
            }
        }

        let (dev_task, dev_er) = dataset_loss(&params, dev, er)?;
        let dev_total = dev_task + lambda * dev_er;
        log.push(EpochLog {
            epoch,
            train_task: task_acc / batches.len() as f64,
            train_er: if er_batches > 0 { er_acc / er_batches as f64 } else { 0.0 },
            dev_task,
            dev_er,
            dev_total,
        });

        if dev_total < best_loss {
            best_loss = dev_total;
            best_params = params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok((
        best_params,
        TrainingLog { epochs: log, best_epoch, stopped_early },
    ))
}

/// Checkpoint file: shapes, flat weight arrays, seed, config hash, and the
/// vocabulary needed to encode evaluation data.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub mode: TaskMode,
    pub shapes: CheckpointShapes,
    pub weights: CheckpointWeights,
    pub vocab: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointShapes {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub max_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointWeights {
    pub embedding: Vec<f64>,
    pub w_query: Vec<f64>,
    pub w_key: Vec<f64>,
    pub w_value: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, vocab: &Vocab, config_hash: &str) -> Self {
        Checkpoint {
            schema_version: 1,
            config_hash: config_hash.to_string(),
            seed: params.seed,
            mode: params.cfg.mode,
            shapes: CheckpointShapes {
                vocab_size: params.cfg.vocab_size,
                embed_dim: params.cfg.embed_dim,
                n_classes: params.cfg.n_classes,
                max_len: params.cfg.max_len,
            },
            weights: CheckpointWeights {
                embedding: params.embedding.clone(),
                w_query: params.w_query.clone(),
                w_key: params.w_key.clone(),
                w_value: params.w_value.clone(),
                w_out: params.w_out.clone(),
                b_out: params.b_out.clone(),
                head_w: params.head_w.clone(),
                head_b: params.head_b.clone(),
            },
            vocab: vocab.tokens().to_vec(),
        }
    }

    pub fn into_parts(self) -> Result<(ModelParams, Vocab)> {
        let cfg = ModelConfig {
            vocab_size: self.shapes.vocab_size,
            embed_dim: self.shapes.embed_dim,
            n_classes: self.shapes.n_classes,
            mode: self.mode,
            max_len: self.shapes.max_len,
        };
        let expect = |name: &'static str, got: usize, want: usize| -> Result<()> {
            if got != want {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    details: format!("{name} has {got} values, shapes imply {want}"),
                });
            }
            Ok(())
        };
        expect("embedding", self.weights.embedding.len(), cfg.vocab_size * cfg.embed_dim)?;
        expect("w_query", self.weights.w_query.len(), cfg.embed_dim * cfg.embed_dim)?;
        expect("w_out", self.weights.w_out.len(), cfg.embed_dim * cfg.n_classes)?;
        expect("b_out", self.weights.b_out.len(), cfg.n_classes)?;
        let params = ModelParams {
            cfg,
            seed: self.seed,
            embedding: self.weights.embedding,
            w_query: self.weights.w_query,
            w_key: self.weights.w_key,
            w_value: self.weights.w_value,
            w_out: self.weights.w_out,
            b_out: self.weights.b_out,
            head_w: self.weights.head_w,
            head_b: self.weights.head_b,
        };
        let vocab = Vocab::from_tokens(self.vocab);
        Ok((params, vocab))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path.as_ref(), json)
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
