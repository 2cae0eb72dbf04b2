//! Reverse-mode differentiation over the transformer's op set, and a
//! single-sequence training loop.
//!
//! The tape is not a general autodiff engine. It knows exactly the
//! operations the forward pass uses (matmul, RMSNorm, causal softmax,
//! Hadamard, SiLU, embedding gather, column split/concat, cross entropy),
//! and computes node values with the same functions as
//! [`crate::transformer`], so recorded logits equal `model_forward`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, log_sum_exp, sigmoid, DenseMatrix, SeededRng};
use crate::transformer::{causal_softmax, rmsnorm_rows, Model, ModelConfig, ModelWeights};

/// Handle to a node on a [`GradientTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Param,
    Const,
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    Add(Var, Var),
    Hadamard(Var, Var),
    Silu(Var),
    RmsNorm { x: Var, w: Var },
    Gather { table: Var, ids: Vec<usize> },
    Columns { x: Var, start: usize, width: usize },
    HConcat(Vec<Var>),
    CausalSoftmax { x: Var, gamma: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DenseMatrix,
}

/// Records a computation over [`DenseMatrix`] values for one backward pass.
#[derive(Debug, Clone, Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op, |v| &self.nodes[v.0].value)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn eval<'a>(&'a self, op: &Op, val: impl Fn(Var) -> &'a DenseMatrix) -> Result<DenseMatrix> {
        Ok(match op {
            Op::Param | Op::Const => unreachable!("leaves carry their own values"),
            Op::MatMul(a, b) => linalg::matmul(val(*a), val(*b))?,
            Op::MatMulTransB(a, b) => linalg::matmul_transb(val(*a), val(*b))?,
            Op::Add(a, b) => val(*a).add(val(*b))?,
            Op::Hadamard(a, b) => linalg::hadamard(val(*a), val(*b))?,
            Op::Silu(a) => linalg::silu(val(*a)),
            Op::RmsNorm { x, w } => rmsnorm_rows(val(*x), val(*w).as_slice())?,
            Op::Gather { table, ids } => {
                let t = val(*table);
                if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &i)| i >= t.rows()) {
                    return Err(Error::TokenOutOfRange {
                        position,
                        id,
                        vocab_size: t.rows(),
                    });
                }
                t.gather_rows(ids)
            }
            Op::Columns { x, start, width } => val(*x).column_block(*start, *width),
            Op::HConcat(parts) => {
                DenseMatrix::hconcat(&parts.iter().map(|p| val(*p).clone()).collect::<Vec<_>>())?
            }
            Op::CausalSoftmax { x, gamma } => causal_softmax(val(*x), *gamma),
            Op::CrossEntropy { logits, targets } => {
                DenseMatrix::filled(1, 1, cross_entropy_loss(val(*logits), targets)?)
            }
            Op::Sum(a) => DenseMatrix::filled(1, 1, val(*a).as_slice().iter().sum()),
        })
    }

    /// A trainable leaf. Gradients are returned in registration order.
    pub fn param(&mut self, value: DenseMatrix) -> Var {
        self.nodes.push(Node {
            op: Op::Param,
            value,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push(v);
        v
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.nodes.push(Node { op: Op::Const, value });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `a·bᵀ`.
    pub fn matmul_transb(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulTransB(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Hadamard(a, b))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Silu(a))
    }

    /// Row-wise RMSNorm of `x` with a `1 × d` weight row `w`.
    pub fn rmsnorm(&mut self, x: Var, w: Var) -> Result<Var> {
        self.push(Op::RmsNorm { x, w })
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::Gather {
            table,
            ids: ids.to_vec(),
        })
    }

    pub fn columns(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let cols = self.value(x).cols();
        if width == 0 || start + width > cols {
            return Err(Error::InvalidArgument(format!(
                "column block {start}..{} outside {cols} columns",
                start + width
            )));
        }
        self.push(Op::Columns { x, start, width })
    }

    pub fn hconcat(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::HConcat(parts.to_vec()))
    }

    pub fn causal_softmax(&mut self, x: Var, gamma: f64) -> Result<Var> {
        self.push(Op::CausalSoftmax { x, gamma })
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    /// Recompute every node from the leaves and return the value of `v`.
    pub fn replay(&self, v: Var) -> Result<DenseMatrix> {
        self.check_var(v)?;
        let mut values: Vec<DenseMatrix> = Vec::with_capacity(v.0 + 1);
        for node in &self.nodes[..=v.0] {
            let value = match node.op {
                Op::Param | Op::Const => node.value.clone(),
                ref op => {
                    let vals = &values;
                    self.eval(op, |x| &vals[x.0])?
                }
            };
            values.push(value);
        }
        Ok(values.pop().expect("at least one node"))
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(
                "backward called on a value that was never recorded".into(),
            ));
        }
        Ok(())
    }

    /// Gradients of the scalar `loss` with respect to every parameter, in
    /// registration order. Parameters the loss does not depend on get
    /// exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Vec<DenseMatrix>> {
        self.check_var(loss)?;
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got {}x{}",
                self.value(loss).rows(),
                self.value(loss).cols()
            )));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(DenseMatrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            let mut acc = |v: Var, d: DenseMatrix| -> Result<()> {
                grads[v.0] = Some(match grads[v.0].take() {
                    Some(prev) => prev.add(&d)?,
                    None => d,
                });
                Ok(())
            };
            match &node.op {
                Op::Param | Op::Const => {
                    // leaves keep their gradient
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(*a, linalg::matmul_transb(&g, val(*b))?)?;
                    acc(*b, linalg::matmul_transa(val(*a), &g)?)?;
                }
                Op::MatMulTransB(a, b) => {
                    acc(*a, linalg::matmul(&g, val(*b))?)?;
                    acc(*b, linalg::matmul_transa(&g, val(*a))?)?;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g)?;
                }
                Op::Hadamard(a, b) => {
                    acc(*a, linalg::hadamard(&g, val(*b))?)?;
                    acc(*b, linalg::hadamard(&g, val(*a))?)?;
                }
                Op::Silu(a) => {
                    let x = val(*a);
                    let dx = DenseMatrix::new(
                        x.rows(),
                        x.cols(),
                        x.as_slice()
                            .iter()
                            .zip(g.as_slice())
                            .map(|(&x, &gy)| {
                                let s = sigmoid(x);
                                gy * s * (1.0 + x * (1.0 - s))
                            })
                            .collect(),
                    )?;
                    acc(*a, dx)?;
                }
                Op::RmsNorm { x, w } => {
                    let (dx, dw) = rmsnorm_backward(val(*x), val(*w).as_slice(), &g);
                    acc(*x, dx)?;
                    acc(*w, dw)?;
                }
                Op::Gather { table, ids } => {
                    let t = val(*table);
                    let mut dt = DenseMatrix::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        dt.row_mut(id)
                            .iter_mut()
                            .zip(g.row(r))
                            .for_each(|(d, gv)| *d += gv);
                    }
                    acc(*table, dt)?;
                }
                Op::Columns { x, start, width } => {
                    let src = val(*x);
                    let mut dx = DenseMatrix::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        dx.row_mut(r)[*start..start + width].copy_from_slice(g.row(r));
                    }
                    acc(*x, dx)?;
                }
                Op::HConcat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = val(*p).cols();
                        acc(*p, g.column_block(off, w))?;
                        off += w;
                    }
                }
                Op::CausalSoftmax { x, gamma } => {
                    let p = &node.value;
                    let mut ds = DenseMatrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let dot: f64 = p.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..p.cols() {
                            ds.set(r, c, gamma * p.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    acc(*x, ds)?;
                }
                Op::CrossEntropy { logits, targets } => {
                    let z = val(*logits);
                    let scale = g.get(0, 0) / targets.len() as f64;
                    let mut dz = linalg::row_softmax(z);
                    for (r, &t) in targets.iter().enumerate() {
                        dz.set(r, t, dz.get(r, t) - 1.0);
                    }
                    acc(*logits, dz.scale(scale))?;
                }
                Op::Sum(a) => {
                    let s = val(*a);
                    acc(*a, DenseMatrix::filled(s.rows(), s.cols(), g.get(0, 0)))?;
                }
            }
        }

        Ok(self
            .params
            .iter()
            .map(|p| {
                grads[p.0].take().unwrap_or_else(|| {
                    let v = self.value(*p);
                    DenseMatrix::zeros(v.rows(), v.cols())
                })
            })
            .collect())
    }
}

/// Backward of `y = (x / rms(x)) ⊙ w` for each row:
/// `dx = (dn − n·mean(dn ⊙ n)) / rms` with `n = x / rms`, `dn = dy ⊙ w`.
fn rmsnorm_backward(x: &DenseMatrix, w: &[f64], g: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    let d = x.cols();
    let mut dx = DenseMatrix::zeros(x.rows(), d);
    let mut dw = DenseMatrix::zeros(1, d);
    for r in 0..x.rows() {
        let row = x.row(r);
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / d as f64).sqrt();
        let n: Vec<f64> = row.iter().map(|v| v / rms).collect();
        let dn: Vec<f64> = g.row(r).iter().zip(w).map(|(a, b)| a * b).collect();
        let mean_dot = dn.iter().zip(&n).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for c in 0..d {
            dx.set(r, c, (dn[c] - n[c] * mean_dot) / rms);
            dw.as_mut_slice()[c] += g.get(r, c) * n[c];
        }
    }
    (dx, dw)
}

/// Mean over rows of `−log softmax(row)[target]` (nats).
pub fn cross_entropy_loss(logits: &DenseMatrix, targets: &[usize]) -> Result<f64> {
    if targets.len() != logits.rows() {
        return Err(Error::InvalidArgument(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    let mut sum = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols() {
            return Err(Error::TokenOutOfRange {
                position: r,
                id: t,
                vocab_size: logits.cols(),
            });
        }
        let row = logits.row(r);
        sum += log_sum_exp(row) - row[t];
    }
    Ok(sum / targets.len() as f64)
}

struct TapeBlock {
    w_norm1: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    w_norm2: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
    residual_adapter: Option<Var>,
}

/// Model parameters registered on a tape, in `named_tensors` order.
struct TapeModel {
    embedding: Var,
    blocks: Vec<TapeBlock>,
    w_norm_final: Var,
    unembedding: Var,
}

fn register(tape: &mut GradientTape, w: &ModelWeights) -> TapeModel {
    let embedding = tape.param(w.embedding.clone());
    let blocks = w
        .blocks
        .iter()
        .map(|b| TapeBlock {
            w_norm1: tape.param(DenseMatrix::row_vector(&b.w_norm1)),
            w_q: tape.param(b.w_q.clone()),
            w_k: tape.param(b.w_k.clone()),
            w_v: tape.param(b.w_v.clone()),
            w_o: tape.param(b.w_o.clone()),
            w_norm2: tape.param(DenseMatrix::row_vector(&b.w_norm2)),
            w_gate: tape.param(b.w_gate.clone()),
            w_up: tape.param(b.w_up.clone()),
            w_down: tape.param(b.w_down.clone()),
            residual_adapter: b.residual_adapter.as_ref().map(|a| tape.param(a.clone())),
        })
        .collect();
    let w_norm_final = tape.param(DenseMatrix::row_vector(&w.w_norm_final));
    let unembedding = tape.param(w.unembedding.clone());
    TapeModel {
        embedding,
        blocks,
        w_norm_final,
        unembedding,
    }
}

fn tape_block(tape: &mut GradientTape, b: &TapeBlock, e: Var, cfg: &ModelConfig) -> Result<Var> {
    let n1 = tape.rmsnorm(e, b.w_norm1)?;
    let q = tape.matmul(n1, b.w_q)?;
    let k = tape.matmul(n1, b.w_k)?;
    let v = tape.matmul(n1, b.w_v)?;
    let hd = cfg.head_dim;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let g = cfg.kv_head_for(h);
        let qh = tape.columns(q, h * hd, hd)?;
        let kh = tape.columns(k, g * hd, hd)?;
        let vh = tape.columns(v, g * hd, hd)?;
        let scores = tape.matmul_transb(qh, kh)?;
        let w = tape.causal_softmax(scores, cfg.gamma)?;
        heads.push(tape.matmul(w, vh)?);
    }
    let concat = tape.hconcat(&heads)?;
    let attn = tape.matmul(concat, b.w_o)?;
    let e1 = tape.add(e, attn)?;

    let n2 = tape.rmsnorm(e1, b.w_norm2)?;
    let gate = tape.matmul(n2, b.w_gate)?;
    let up = tape.matmul(n2, b.w_up)?;
    let gu = tape.hadamard(gate, up)?;
    let act = tape.silu(gu)?;
    let mlp = tape.matmul(act, b.w_down)?;
    let out = tape.add(e1, mlp)?;
    match b.residual_adapter {
        Some(a) => tape.matmul(out, a),
        None => Ok(out),
    }
}

fn tape_logits(tape: &mut GradientTape, tm: &TapeModel, tokens: &[usize], cfg: &ModelConfig) -> Result<Var> {
    cfg.check_tokens(tokens)?;
    let mut h = tape.gather(tm.embedding, tokens)?;
    for b in &tm.blocks {
        h = tape_block(tape, b, h, cfg)?;
    }
    let n = tape.rmsnorm(h, tm.w_norm_final)?;
    tape.matmul(n, tm.unembedding)
}

/// Record the forward pass of `model` on `tokens` and return the tape with
/// the logits node.
pub fn record_forward(model: &Model, tokens: &[usize]) -> Result<(GradientTape, Var)> {
    let mut tape = GradientTape::new();
    let tm = register(&mut tape, &model.weights);
    let logits = tape_logits(&mut tape, &tm, tokens, &model.config)?;
    Ok((tape, logits))
}

/// Cross-entropy of predicting `targets` from `inputs`, with gradients
/// aligned to `ModelWeights::named_tensors`.
pub fn loss_and_gradients(model: &Model, inputs: &[usize], targets: &[usize]) -> Result<(f64, Vec<DenseMatrix>)> {
    let (mut tape, logits) = record_forward(model, inputs)?;
    let loss = tape.cross_entropy(logits, targets)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).get(0, 0), grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_len: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl TrainConfig {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if self.batch_len < 1 || self.batch_len > cfg.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "batch length {} must be in 1..={}",
                self.batch_len, cfg.max_seq_len
            )));
        }
        Ok(())
    }
}

/// Train on random windows of `corpus`, one sequence per step. Returns the
/// loss of every step (measured before that step's update).
pub fn train(model: &mut Model, corpus: &[usize], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate(&model.config)?;
    if corpus.len() <= cfg.batch_len {
        return Err(Error::InvalidArgument(format!(
            "corpus of {} tokens is too short for batches of {}",
            corpus.len(),
            cfg.batch_len
        )));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let sizes: Vec<usize> = model
        .weights
        .named_tensors()
        .iter()
        .map(|(_, v)| v.data.len())
        .collect();
    let mut m1: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut m2 = m1.clone();
    let mut losses = Vec::with_capacity(cfg.steps);
    let windows = corpus.len() - cfg.batch_len;

    for step in 1..=cfg.steps {
        let start = rng.below(windows);
        let inputs = &corpus[start..start + cfg.batch_len];
        let targets = &corpus[start + 1..start + cfg.batch_len + 1];
        let (loss, grads) = loss_and_gradients(model, inputs, targets)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("loss became {loss} at step {step}")));
        }
        losses.push(loss);

        let params = model.weights.named_slices_mut();
        for (i, ((_, p), g)) in params.into_iter().zip(&grads).enumerate() {
            let g = g.as_slice();
            match cfg.optimizer {
                Optimizer::Sgd => {
                    p.iter_mut().zip(g).for_each(|(w, gw)| *w -= cfg.lr * gw);
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(step as i32);
                    let bc2 = 1.0 - beta2.powi(step as i32);
                    for j in 0..p.len() {
                        m1[i][j] = beta1 * m1[i][j] + (1.0 - beta1) * g[j];
                        m2[i][j] = beta2 * m2[i][j] + (1.0 - beta2) * g[j] * g[j];
                        let mhat = m1[i][j] / bc1;
                        let vhat = m2[i][j] / bc2;
                        p[j] -= cfg.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        if step % 200 == 0 {
            log::info!("step {step}: loss {loss:.4}");
        }
    }
    Ok(losses)
}
