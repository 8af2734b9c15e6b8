//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Operations are recorded on a [`Tape`] in construction order; `backward`
//! replays them in exact reverse order and accumulates gradients (sum
//! semantics) until `zero_grads` is called. Elementwise ops broadcast only
//! over a leading batch dimension: `[batch, rest..] ⊕ [rest..]`.

use crate::criteria::{self, CriterionKind};
use crate::error::{Error, Result};

/// Dense row-major f64 tensor. Scalars use the empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                details: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { data, shape })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { data: vec![v], shape: vec![] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { data: vec![0.0; numel], shape: shape.to_vec() }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }
}

/// Handle to a node on a tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Matmul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    EmbeddingLookup { table: TensorId, ids: Vec<usize> },
    Softmax { x: TensorId },
    Sigmoid { x: TensorId },
    Tanh { x: TensorId },
    Log { x: TensorId },
    Mean { x: TensorId },
    Sum { x: TensorId },
    Scale { x: TensorId, c: f64 },
    Reshape { x: TensorId },
    CrossEntropy { logits: TensorId, targets: Vec<usize> },
    Criterion { probs: TensorId, mask: Vec<u8>, kind: CriterionKind, delta: f64 },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Wengert list: nodes are appended in construction order, so parents always
/// precede children and the reverse sweep is a single backwards loop.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the last axis with max-subtraction; rows sum to 1.
fn softmax_rows(data: &[f64], row_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row_in, row_out) in data.chunks(row_len).zip(out.chunks_mut(row_len)) {
        let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (o, &x) in row_out.iter_mut().zip(row_in) {
            *o = (x - max).exp();
            denom += *o;
        }
        for o in row_out.iter_mut() {
            *o /= denom;
        }
    }
    out
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor (parameter or constant) as a leaf.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { value, grad: None, op });
        TensorId(self.nodes.len() - 1)
    }

    fn shape_of(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Broadcast check for elementwise ops: equal shapes, or `b` equal to
    /// `a` minus its leading dimension.
    fn elementwise_plan(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<bool> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sa == sb {
            return Ok(false);
        }
        if sa.len() == sb.len() + 1 && &sa[1..] == sb {
            return Ok(true);
        }
        Err(Error::ShapeMismatch {
            op,
            details: format!("lhs {sa:?} vs rhs {sb:?}"),
        })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let broadcast = self.elementwise_plan("add", a, b)?;
        let (da, db) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let chunk = db.numel();
        let data: Vec<f64> = if broadcast {
            da.data()
                .chunks(chunk)
                .flat_map(|row| row.iter().zip(db.data()).map(|(&x, &y)| x + y))
                .collect()
        } else {
            da.data().iter().zip(db.data()).map(|(&x, &y)| x + y).collect()
        };
        let shape = da.shape().to_vec();
        Ok(self.push(Tensor { data, shape }, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let broadcast = self.elementwise_plan("mul", a, b)?;
        let (da, db) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let chunk = db.numel();
        let data: Vec<f64> = if broadcast {
            da.data()
                .chunks(chunk)
                .flat_map(|row| row.iter().zip(db.data()).map(|(&x, &y)| x * y))
                .collect()
        } else {
            da.data().iter().zip(db.data()).map(|(&x, &y)| x * y).collect()
        };
        let shape = da.shape().to_vec();
        Ok(self.push(Tensor { data, shape }, Op::Mul { a, b }))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                details: format!("lhs {sa:?} vs rhs {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += aip * db[p * n + j];
                }
            }
        }
        Ok(self.push(Tensor { data: out, shape: vec![m, n] }, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                details: format!("expected 2-d, got {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let d = self.nodes[x.0].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push(Tensor { data: out, shape: vec![c, r] }, Op::Transpose { x }))
    }

    /// Gather rows of `table` ([vocab, dim]) by token id, producing [n, dim].
    pub fn embedding_lookup(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let s = self.shape_of(table).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding_lookup",
                details: format!("table must be 2-d, got {s:?}"),
            });
        }
        if ids.is_empty() {
            return Err(Error::InvalidValue {
                what: "embedding_lookup",
                details: "empty id sequence".into(),
            });
        }
        let (vocab, dim) = (s[0], s[1]);
        for &id in ids {
            if id >= vocab {
                return Err(Error::IndexOutOfRange { what: "token id", got: id, limit: vocab });
            }
        }
        let d = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&d[id * dim..(id + 1) * dim]);
        }
        let op = Op::EmbeddingLookup { table, ids: ids.to_vec() };
        Ok(self.push(Tensor { data: out, shape: vec![ids.len(), dim] }, op))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape_of(x).to_vec();
        let Some(&row_len) = s.last() else {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                details: "scalar input".into(),
            });
        };
        let data = softmax_rows(self.nodes[x.0].value.data(), row_len);
        Ok(self.push(Tensor { data, shape: s }, Op::Softmax { x }))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&x| stable_sigmoid(x)).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor { data, shape }, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&x| x.tanh()).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor { data, shape }, Op::Tanh { x })
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        for (i, &e) in v.data().iter().enumerate() {
            if e.is_nan() || e <= 0.0 {
                return Err(Error::InvalidValue {
                    what: "log",
                    details: format!("element {i} is {e}, must be positive"),
                });
            }
        }
        let data = v.data().iter().map(|&x| x.ln()).collect();
        let shape = v.shape().to_vec();
        Ok(self.push(Tensor { data, shape }, Op::Log { x }))
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let v = &self.nodes[x.0].value;
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean { x })
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let v = &self.nodes[x.0].value;
        let s = v.data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&x| c * x).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor { data, shape }, Op::Scale { x, c })
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {shape:?}", v.shape()),
            });
        }
        let data = v.data().to_vec();
        Ok(self.push(Tensor { data, shape: shape.to_vec() }, Op::Reshape { x }))
    }

    /// Mean negative log softmax probability of the targets, log-sum-exp
    /// stabilized. Accepts logits [classes] with one target or
    /// [tokens, classes] with one target per token.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let s = self.shape_of(logits).to_vec();
        let (rows, classes) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy",
                    details: format!("logits must be 1-d or 2-d, got {s:?}"),
                })
            }
        };
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                details: format!("{rows} logit rows vs {} targets", targets.len()),
            });
        }
        for &t in targets {
            if t >= classes {
                return Err(Error::IndexOutOfRange { what: "class", got: t, limit: classes });
            }
        }
        let d = self.nodes[logits.0].value.data();
        let mut acc = 0.0;
        for (row, &t) in d.chunks(classes).zip(targets) {
            acc += log_sum_exp(row) - row[t];
        }
        let value = Tensor::scalar(acc / rows as f64);
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec() }))
    }

    /// Fused rationale alignment criterion Φ(probs, mask) as a scalar node.
    pub fn criterion(
        &mut self,
        probs: TensorId,
        mask: &[u8],
        kind: CriterionKind,
        delta: f64,
    ) -> Result<TensorId> {
        let v = &self.nodes[probs.0].value;
        let value = criteria::criterion_value(kind, delta, v.data(), mask)?;
        let op = Op::Criterion { probs, mask: mask.to_vec(), kind, delta };
        Ok(self.push(Tensor::scalar(value), op))
    }

    fn accumulate(&mut self, id: TensorId, contrib: &[f64]) {
        let node = &mut self.nodes[id.0];
        let grad = node
            .grad
            .get_or_insert_with(|| vec![0.0; node.value.numel()]);
        for (g, &c) in grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    /// Populate gradients of `loss` with respect to every reachable node.
    /// Gradients accumulate across calls until `zero_grads`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::InvalidValue {
                what: "backward",
                details: format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            });
        }
        // Local upstream gradients for this sweep; node.grad keeps the
        // accumulated total across sweeps.
        let mut up: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        up[loss.0] = Some(vec![1.0]);
        self.accumulate(loss, &[1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = up[idx].take() else { continue };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    self.spread(&mut up, a, &dy);
                    let nb = self.nodes[b.0].value.numel();
                    if nb == dy.len() {
                        self.spread(&mut up, b, &dy);
                    } else {
                        // Broadcast over the leading dim: sum row gradients.
                        let mut db = vec![0.0; nb];
                        for row in dy.chunks(nb) {
                            for (g, &r) in db.iter_mut().zip(row) {
                                *g += r;
                            }
                        }
                        self.spread(&mut up, b, &db);
                    }
                }
                Op::Mul { a, b } => {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let av = self.nodes[a.0].value.data().to_vec();
                    let nb = bv.len();
                    if nb == dy.len() {
                        let da: Vec<f64> = dy.iter().zip(&bv).map(|(&g, &b)| g * b).collect();
                        let db: Vec<f64> = dy.iter().zip(&av).map(|(&g, &a)| g * a).collect();
                        self.spread(&mut up, a, &da);
                        self.spread(&mut up, b, &db);
                    } else {
                        let da: Vec<f64> = dy
                            .chunks(nb)
                            .flat_map(|row| row.iter().zip(&bv).map(|(&g, &b)| g * b))
                            .collect();
                        let mut db = vec![0.0; nb];
                        for (row_dy, row_a) in dy.chunks(nb).zip(av.chunks(nb)) {
                            for ((g, &r), &a) in db.iter_mut().zip(row_dy).zip(row_a) {
                                *g += r * a;
                            }
                        }
                        self.spread(&mut up, a, &da);
                        self.spread(&mut up, b, &db);
                    }
                }
                Op::Matmul { a, b } => {
                    let sa = self.nodes[a.0].value.shape().to_vec();
                    let sb = self.nodes[b.0].value.shape().to_vec();
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let av = self.nodes[a.0].value.data().to_vec();
                    let bv = self.nodes[b.0].value.data().to_vec();
                    // dA = dY · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = dy[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += g * bv[p * n + j];
                            }
                        }
                    }
                    // dB = Aᵀ · dY
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += a_ip * dy[i * n + j];
                            }
                        }
                    }
                    self.spread(&mut up, a, &da);
                    self.spread(&mut up, b, &db);
                }
                Op::Transpose { x } => {
                    let s = self.nodes[idx].value.shape().to_vec(); // [c, r]
                    let (c, r) = (s[0], s[1]);
                    let mut dx = vec![0.0; r * c];
                    for i in 0..c {
                        for j in 0..r {
                            dx[j * c + i] = dy[i * r + j];
                        }
                    }
                    self.spread(&mut up, x, &dx);
                }
                Op::EmbeddingLookup { table, ids } => {
                    let dim = self.nodes[idx].value.shape()[1];
                    let mut dt = vec![0.0; self.nodes[table.0].value.numel()];
                    for (row, &id) in ids.iter().enumerate() {
                        for d in 0..dim {
                            dt[id * dim + d] += dy[row * dim + d];
                        }
                    }
                    self.spread(&mut up, table, &dt);
                }
                Op::Softmax { x } => {
                    let y = self.nodes[idx].value.data().to_vec();
                    let row_len = *self.nodes[idx].value.shape().last().unwrap();
                    let mut dx = vec![0.0; y.len()];
                    for ((row_y, row_dy), row_dx) in y
                        .chunks(row_len)
                        .zip(dy.chunks(row_len))
                        .zip(dx.chunks_mut(row_len))
                    {
                        let dot: f64 = row_y.iter().zip(row_dy).map(|(&y, &g)| y * g).sum();
                        for ((dx_e, &y_e), &g_e) in row_dx.iter_mut().zip(row_y).zip(row_dy) {
                            *dx_e = y_e * (g_e - dot);
                        }
                    }
                    self.spread(&mut up, x, &dx);
                }
                Op::Sigmoid { x } => {
                    let y = self.nodes[idx].value.data().to_vec();
                    let dx: Vec<f64> =
                        y.iter().zip(&dy).map(|(&y, &g)| g * y * (1.0 - y)).collect();
                    self.spread(&mut up, x, &dx);
                }
                Op::Tanh { x } => {
                    let y = self.nodes[idx].value.data().to_vec();
                    let dx: Vec<f64> =
                        y.iter().zip(&dy).map(|(&y, &g)| g * (1.0 - y * y)).collect();
                    self.spread(&mut up, x, &dx);
                }
                Op::Log { x } => {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let dx: Vec<f64> = xv.iter().zip(&dy).map(|(&x, &g)| g / x).collect();
                    self.spread(&mut up, x, &dx);
                }
                Op::Mean { x } => {
                    let n = self.nodes[x.0].value.numel();
                    let dx = vec![dy[0] / n as f64; n];
                    self.spread(&mut up, x, &dx);
                }
                Op::Sum { x } => {
                    let n = self.nodes[x.0].value.numel();
                    let dx = vec![dy[0]; n];
                    self.spread(&mut up, x, &dx);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = dy.iter().map(|&g| g * c).collect();
                    self.spread(&mut up, x, &dx);
                }
                Op::Reshape { x } => {
                    self.spread(&mut up, x, &dy);
                }
                Op::CrossEntropy { logits, targets } => {
                    let s = self.nodes[logits.0].value.shape().to_vec();
                    let classes = *s.last().unwrap();
                    let rows = targets.len();
                    let probs = softmax_rows(self.nodes[logits.0].value.data(), classes);
                    let mut dl = probs;
                    for (row, &t) in targets.iter().enumerate() {
                        dl[row * classes + t] -= 1.0;
                    }
                    let w = dy[0] / rows as f64;
                    for g in dl.iter_mut() {
                        *g *= w;
                    }
                    self.spread(&mut up, logits, &dl);
                }
                Op::Criterion { probs, mask, kind, delta } => {
                    let pv = self.nodes[probs.0].value.data().to_vec();
                    let mut dp = criteria::criterion_grad(kind, delta, &pv, &mask)
                        .expect("criterion forward already validated inputs");
                    for g in dp.iter_mut() {
                        *g *= dy[0];
                    }
                    self.spread(&mut up, probs, &dp);
                }
            }
        }
        Ok(())
    }

    fn spread(&mut self, up: &mut [Option<Vec<f64>>], id: TensorId, contrib: &[f64]) {
        match &mut up[id.0] {
            Some(buf) => {
                for (g, &c) in buf.iter_mut().zip(contrib) {
                    *g += c;
                }
            }
            None => up[id.0] = Some(contrib.to_vec()),
        }
        self.accumulate(id, contrib);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        tape.leaf(Tensor::new(data, shape).unwrap())
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![0.0, 0.0, 0.0], vec![3]);
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3.0, -1.0, 0.5, 100.0, -50.0, 2.0], vec![2, 3]);
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![0.0], vec![1]);
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let i = leaf(&mut tape, vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1.0, 2.0], vec![1, 2]);
        let b = leaf(&mut tape, vec![1.0, 2.0, 3.0], vec![3, 1]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[1, 2]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1.0, -2.0, 7.0], vec![3]);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_is_two_x() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2.0], vec![1]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1.0, 2.0], vec![2]);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1.0, 1.0], vec![2]);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad of (a·f + b·g) == a·grad(f) + b·grad(g)
        let build = |wa: f64, wb: f64| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, vec![0.3, -1.2, 2.2], vec![3]);
            let sq = tape.mul(x, x).unwrap();
            let f = tape.sum(sq);
            let sg = tape.sigmoid(x);
            let g = tape.mean(sg);
            let fa = tape.scale(f, wa);
            let gb = tape.scale(g, wb);
            let loss = tape.add(fa, gb).unwrap();
            tape.backward(loss).unwrap();
            let got = tape.grad(x).unwrap().to_vec();
            (got, vec![])
        };
        let (g_f, _) = build(1.0, 0.0);
        let (g_g, _) = build(0.0, 1.0);
        let (g_mix, _) = build(2.0, -3.0);
        for t in 0..3 {
            let want = 2.0 * g_f[t] - 3.0 * g_g[t];
            assert!((g_mix[t] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let l = leaf(&mut tape, vec![0.0, 0.0], vec![2]);
        let ce = tape.cross_entropy(l, &[0]).unwrap();
        assert!((tape.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let l = leaf(&mut tape, vec![1000.0, 0.0], vec![2]);
        let ce = tape.cross_entropy(l, &[0]).unwrap();
        let v = tape.value(ce).item();
        assert!(v.is_finite() && v.abs() < 1e-9, "got {v}");

        let l = leaf(&mut tape, vec![1.0, 0.0], vec![2]);
        let ce = tape.cross_entropy(l, &[1]).unwrap();
        let want = -(1.0f64 / (1.0 + std::f64::consts::E)).ln();
        assert!((tape.value(ce).item() - want).abs() < 1e-4);
        assert!((tape.value(ce).item() - 1.3133).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_bad_class() {
        let mut tape = Tape::new();
        let l = leaf(&mut tape, vec![0.0, 0.0], vec![2]);
        assert!(tape.cross_entropy(l, &[2]).is_err());
    }

    #[test]
    fn token_mode_cross_entropy_averages_rows() {
        let mut tape = Tape::new();
        let l = leaf(&mut tape, vec![0.0, 0.0, 0.0, 0.0], vec![2, 2]);
        let ce = tape.cross_entropy(l, &[0, 1]).unwrap();
        assert!((tape.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn embedding_lookup_gathers_and_scatters() {
        let mut tape = Tape::new();
        let table = leaf(&mut tape, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2]);
        let e = tape.embedding_lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(e);
        tape.backward(loss).unwrap();
        // Token 2 used twice, token 0 once, token 1 never.
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        let bad = tape.embedding_lookup(table, &[3]);
        assert!(bad.is_err());
    }

    #[test]
    fn broadcast_add_over_leading_dim() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let b = leaf(&mut tape, vec![10.0, 20.0], vec![2]);
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0]);
        // Mismatched trailing shape is rejected.
        let c = leaf(&mut tape, vec![1.0, 2.0, 3.0], vec![3]);
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn gradients_are_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, vec![0.5, -0.25, 0.125], vec![3]);
            let w = leaf(&mut tape, vec![1.5, 2.5, -0.5], vec![3]);
            let p = tape.mul(x, w).unwrap();
            let s = tape.tanh(p);
            let loss = tape.mean(s);
            tape.backward(loss).unwrap();
            (
                tape.grad(x).unwrap().to_vec(),
                tape.grad(w).unwrap().to_vec(),
            )
        };
        let (x1, w1) = run();
        let (x2, w2) = run();
        assert_eq!(x1, x2);
        assert_eq!(w1, w2);
    }
}
