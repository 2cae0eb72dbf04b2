//! Decoder-only transformer forward pass.
//!
//! Activations are `[l × d]` matrices and weights multiply on the right
//! (`E·W`), with every weight shape taken from the standard Llama-style
//! layout:
//!
//! | weight    | shape                 |
//! |-----------|-----------------------|
//! | `w_norm*` | `d`                   |
//! | `w_q`     | `d × h_attn·h_dim`    |
//! | `w_k`     | `d × v·h_dim`         |
//! | `w_v`     | `d × v·h_dim`         |
//! | `w_o`     | `h_attn·h_dim × d`    |
//! | `w_gate`  | `d × m`               |
//! | `w_up`    | `d × m`               |
//! | `w_down`  | `m × d`               |
//!
//! Blocks are pre-norm with residual connections and causal attention.
//! There is no position encoding, dropout or bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, SeededRng};

/// Dimension algebra of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Representation (residual stream) dimension.
    pub d: usize,
    /// MLP intermediate size.
    pub m: usize,
    /// Number of attention heads `h_attn`.
    pub heads: usize,
    /// Head dimension `h_dim`.
    pub head_dim: usize,
    /// Number of key/value heads `v`.
    pub kv_heads: usize,
    pub n_blocks: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Attention logit scale.
    pub gamma: f64,
}

impl ModelConfig {
    /// A fresh (unsliced) config. Requires `heads · head_dim == d`; `gamma`
    /// defaults to `1/√head_dim`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d: usize,
        m: usize,
        heads: usize,
        head_dim: usize,
        kv_heads: usize,
        n_blocks: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Result<Self> {
        let cfg = Self {
            d,
            m,
            heads,
            head_dim,
            kv_heads,
            n_blocks,
            vocab_size,
            max_seq_len,
            gamma: 1.0 / (head_dim as f64).sqrt(),
        };
        cfg.validate()?;
        if heads * head_dim != d {
            return Err(Error::InvalidConfig(format!(
                "heads * head_dim must equal d (W_q is d x h_attn*h_dim with h_attn*h_dim = d): {heads} * {head_dim} = {} != {d}",
                heads * head_dim
            )));
        }
        Ok(cfg)
    }

    /// Checks everything except the `heads · head_dim == d` tie, which
    /// slicing releases.
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d", self.d),
            ("m", self.m),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("kv_heads", self.kv_heads),
            ("n_blocks", self.n_blocks),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(Error::InvalidConfig(format!(
                "kv_heads ({}) must divide heads ({})",
                self.kv_heads, self.heads
            )));
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(Error::InvalidConfig(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn attn_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    /// Key/value head shared by query head `head`.
    pub fn kv_head_for(&self, head: usize) -> usize {
        head * self.kv_heads / self.heads
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.max_seq_len {
            return Err(Error::SequenceLength {
                len: tokens.len(),
                min: 1,
                max: self.max_seq_len,
            });
        }
        if let Some((position, &id)) = tokens.iter().enumerate().find(|(_, &t)| t >= self.vocab_size) {
            return Err(Error::TokenOutOfRange {
                position,
                id,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub w_norm1: Vec<f64>,
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
    pub w_o: DenseMatrix,
    pub w_norm2: Vec<f64>,
    pub w_gate: DenseMatrix,
    pub w_up: DenseMatrix,
    pub w_down: DenseMatrix,
    /// Change of residual basis applied to the block output. Only present
    /// after per-block rotation.
    pub residual_adapter: Option<DenseMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embedding: DenseMatrix,
    pub blocks: Vec<BlockWeights>,
    pub w_norm_final: Vec<f64>,
    pub unembedding: DenseMatrix,
}

/// Borrowed view of one named tensor, in canonical order.
#[derive(Debug, Clone, Copy)]
pub struct TensorView<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

/// Canonical tensor names for block `i`.
pub const BLOCK_TENSORS: [&str; 9] = [
    "w_norm1", "w_q", "w_k", "w_v", "w_o", "w_norm2", "w_gate", "w_up", "w_down",
];
pub const RESIDUAL_ADAPTER: &str = "residual_adapter";

fn vec_view(v: &[f64]) -> TensorView<'_> {
    TensorView {
        rows: 1,
        cols: v.len(),
        data: v,
    }
}

fn mat_view(m: &DenseMatrix) -> TensorView<'_> {
    TensorView {
        rows: m.rows(),
        cols: m.cols(),
        data: m.as_slice(),
    }
}

impl BlockWeights {
    fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        const STD: f64 = 0.02;
        let d = cfg.d;
        Self {
            w_norm1: vec![1.0; d],
            w_q: rng.gaussian_matrix(d, cfg.attn_width(), STD),
            w_k: rng.gaussian_matrix(d, cfg.kv_width(), STD),
            w_v: rng.gaussian_matrix(d, cfg.kv_width(), STD),
            w_o: rng.gaussian_matrix(cfg.attn_width(), d, STD),
            w_norm2: vec![1.0; d],
            w_gate: rng.gaussian_matrix(d, cfg.m, STD),
            w_up: rng.gaussian_matrix(d, cfg.m, STD),
            w_down: rng.gaussian_matrix(cfg.m, d, STD),
            residual_adapter: None,
        }
    }

    fn views(&self) -> Vec<(&'static str, TensorView<'_>)> {
        let mut out = vec![
            ("w_norm1", vec_view(&self.w_norm1)),
            ("w_q", mat_view(&self.w_q)),
            ("w_k", mat_view(&self.w_k)),
            ("w_v", mat_view(&self.w_v)),
            ("w_o", mat_view(&self.w_o)),
            ("w_norm2", vec_view(&self.w_norm2)),
            ("w_gate", mat_view(&self.w_gate)),
            ("w_up", mat_view(&self.w_up)),
            ("w_down", mat_view(&self.w_down)),
        ];
        if let Some(a) = &self.residual_adapter {
            out.push((RESIDUAL_ADAPTER, mat_view(a)));
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = vec![
            ("w_norm1", &mut self.w_norm1[..]),
            ("w_q", self.w_q.as_mut_slice()),
            ("w_k", self.w_k.as_mut_slice()),
            ("w_v", self.w_v.as_mut_slice()),
            ("w_o", self.w_o.as_mut_slice()),
            ("w_norm2", &mut self.w_norm2[..]),
            ("w_gate", self.w_gate.as_mut_slice()),
            ("w_up", self.w_up.as_mut_slice()),
            ("w_down", self.w_down.as_mut_slice()),
        ];
        if let Some(a) = &mut self.residual_adapter {
            out.push((RESIDUAL_ADAPTER, a.as_mut_slice()));
        }
        out
    }

    fn check(&self, cfg: &ModelConfig, idx: usize) -> Result<()> {
        let d = cfg.d;
        let expect = [
            ("w_norm1", (1, d)),
            ("w_q", (d, cfg.attn_width())),
            ("w_k", (d, cfg.kv_width())),
            ("w_v", (d, cfg.kv_width())),
            ("w_o", (cfg.attn_width(), d)),
            ("w_norm2", (1, d)),
            ("w_gate", (d, cfg.m)),
            ("w_up", (d, cfg.m)),
            ("w_down", (cfg.m, d)),
            (RESIDUAL_ADAPTER, (d, d)),
        ];
        for (name, view) in self.views() {
            let want = expect.iter().find(|(n, _)| *n == name).expect("known name").1;
            if (view.rows, view.cols) != want {
                return Err(Error::InvalidConfig(format!(
                    "blocks.{idx}.{name} is {}x{}, config expects {}x{}",
                    view.rows, view.cols, want.0, want.1
                )));
            }
        }
        Ok(())
    }
}

impl ModelWeights {
    /// Seeded Gaussian initialization (std 0.02) with unit norm weights.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let embedding = rng.gaussian_matrix(cfg.vocab_size, cfg.d, 0.02);
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockWeights::init(cfg, &mut rng))
            .collect();
        let unembedding = rng.gaussian_matrix(cfg.d, cfg.vocab_size, 0.02);
        Self {
            embedding,
            blocks,
            w_norm_final: vec![1.0; cfg.d],
            unembedding,
        }
    }

    /// Every tensor with its canonical name, in storage order.
    pub fn named_tensors(&self) -> Vec<(String, TensorView<'_>)> {
        let mut out = vec![(
            "embedding".to_string(),
            TensorView {
                rows: self.embedding.rows(),
                cols: self.embedding.cols(),
                data: self.embedding.as_slice(),
            },
        )];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(
                b.views()
                    .into_iter()
                    .map(|(n, v)| (format!("blocks.{i}.{n}"), v)),
            );
        }
        out.push((
            "w_norm_final".into(),
            TensorView {
                rows: 1,
                cols: self.w_norm_final.len(),
                data: &self.w_norm_final,
            },
        ));
        out.push((
            "unembedding".into(),
            TensorView {
                rows: self.unembedding.rows(),
                cols: self.unembedding.cols(),
                data: self.unembedding.as_slice(),
            },
        ));
        out
    }

    /// Mutable flat views, same order as [`named_tensors`](Self::named_tensors).
    pub fn named_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> =
            vec![("embedding".into(), self.embedding.as_mut_slice())];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.slices_mut()
                    .into_iter()
                    .map(|(n, s)| (format!("blocks.{i}.{n}"), s)),
            );
        }
        out.push(("w_norm_final".into(), &mut self.w_norm_final[..]));
        out.push(("unembedding".into(), self.unembedding.as_mut_slice()));
        out
    }

    /// Rebuild from named tensors (as produced by `named_tensors`).
    pub fn from_named(
        cfg: &ModelConfig,
        mut lookup: impl FnMut(&str) -> Option<(usize, usize, Vec<f64>)>,
    ) -> Result<Self> {
        let mut take = |name: &str| -> Result<DenseMatrix> {
            let (r, c, data) =
                lookup(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            DenseMatrix::new(r, c, data)
        };
        let embedding = take("embedding")?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let mut t = |n: &str| take(&format!("blocks.{i}.{n}"));
            blocks.push(BlockWeights {
                w_norm1: t("w_norm1")?.into_vec(),
                w_q: t("w_q")?,
                w_k: t("w_k")?,
                w_v: t("w_v")?,
                w_o: t("w_o")?,
                w_norm2: t("w_norm2")?.into_vec(),
                w_gate: t("w_gate")?,
                w_up: t("w_up")?,
                w_down: t("w_down")?,
                residual_adapter: t(RESIDUAL_ADAPTER).ok(),
            });
        }
        let w_norm_final = take("w_norm_final")?.into_vec();
        let unembedding = take("unembedding")?;
        let w = Self {
            embedding,
            blocks,
            w_norm_final,
            unembedding,
        };
        w.check(cfg)?;
        Ok(w)
    }

    /// Verify every shape against `cfg`.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        if self.blocks.len() != cfg.n_blocks {
            return Err(Error::InvalidConfig(format!(
                "model has {} blocks, config says {}",
                self.blocks.len(),
                cfg.n_blocks
            )));
        }
        let top = [
            ("embedding", self.embedding.shape(), (cfg.vocab_size, cfg.d)),
            ("w_norm_final", (1, self.w_norm_final.len()), (1, cfg.d)),
            ("unembedding", self.unembedding.shape(), (cfg.d, cfg.vocab_size)),
        ];
        for (name, got, want) in top {
            if got != want {
                return Err(Error::InvalidConfig(format!(
                    "{name} is {}x{}, config expects {}x{}",
                    got.0, got.1, want.0, want.1
                )));
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.check(cfg, i)?;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, v)| v.data.len()).sum()
    }
}

/// Config and weights together.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        weights.check(&config)?;
        Ok(Self { config, weights })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let weights = ModelWeights::init(&config, seed);
        Self { config, weights }
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<DenseMatrix> {
        model_forward(&self.weights, tokens, &self.config)
    }

    pub fn trace(&self, tokens: &[usize]) -> Result<ActivationTrace> {
        capture_trace(&self.weights, tokens, &self.config)
    }
}

/// Row-wise RMSNorm: each row is divided by its root mean square and
/// multiplied elementwise by `w`.
pub fn rmsnorm_rows(e: &DenseMatrix, w: &[f64]) -> Result<DenseMatrix> {
    if e.cols() != w.len() {
        return Err(Error::shape("rmsnorm_rows", e.shape(), (1, w.len())));
    }
    let d = e.cols() as f64;
    let mut out = e.clone();
    for r in 0..e.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        if ms == 0.0 {
            return Err(Error::Numerical(format!(
                "rmsnorm_rows: row {r} is all zeros"
            )));
        }
        let rms = ms.sqrt();
        for (v, wi) in row.iter_mut().zip(w) {
            *v = *v / rms * wi;
        }
    }
    Ok(out)
}

/// Softmax of `gamma·scores` with strictly-upper-triangular entries masked.
pub fn causal_softmax(scores: &DenseMatrix, gamma: f64) -> DenseMatrix {
    let mut out = scores.scale(gamma);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        linalg::softmax_in_place(&mut row[..=r]);
        row[r + 1..].fill(0.0);
    }
    out
}

/// Grouped-query causal self-attention; returns `[l × d]`.
pub fn attention(block: &BlockWeights, e_norm: &DenseMatrix, cfg: &ModelConfig) -> Result<DenseMatrix> {
    Ok(attention_with_weights(block, e_norm, cfg)?.0)
}

/// As [`attention`], also returning the `[l × l]` weight matrix of every
/// query head.
pub fn attention_with_weights(
    block: &BlockWeights,
    e_norm: &DenseMatrix,
    cfg: &ModelConfig,
) -> Result<(DenseMatrix, Vec<DenseMatrix>)> {
    let l = e_norm.rows();
    if l > cfg.max_seq_len {
        return Err(Error::SequenceLength {
            len: l,
            min: 1,
            max: cfg.max_seq_len,
        });
    }
    let q = e_norm.matmul(&block.w_q)?;
    let k = e_norm.matmul(&block.w_k)?;
    let v = e_norm.matmul(&block.w_v)?;
    let hd = cfg.head_dim;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let g = cfg.kv_head_for(h);
        let qh = q.column_block(h * hd, hd);
        let kh = k.column_block(g * hd, hd);
        let vh = v.column_block(g * hd, hd);
        let w = causal_softmax(&linalg::matmul_transb(&qh, &kh)?, cfg.gamma);
        heads.push(w.matmul(&vh)?);
        weights.push(w);
    }
    let concat = DenseMatrix::hconcat(&heads)?;
    Ok((concat.matmul(&block.w_o)?, weights))
}

/// Gated MLP: `σ((A·W_gate) ⊙ (A·W_up))·W_down` with σ = SiLU applied after
/// the Hadamard product.
pub fn mlp(block: &BlockWeights, a_norm: &DenseMatrix) -> Result<DenseMatrix> {
    let gate = a_norm.matmul(&block.w_gate)?;
    let up = a_norm.matmul(&block.w_up)?;
    linalg::silu(&linalg::hadamard(&gate, &up)?).matmul(&block.w_down)
}

/// One pre-norm block with residual connections, followed by the block's
/// residual adapter when it has one.
pub fn block_forward(block: &BlockWeights, e: &DenseMatrix, cfg: &ModelConfig) -> Result<DenseMatrix> {
    let e1 = e.add(&attention(block, &rmsnorm_rows(e, &block.w_norm1)?, cfg)?)?;
    let out = e1.add(&mlp(block, &rmsnorm_rows(&e1, &block.w_norm2)?)?)?;
    match &block.residual_adapter {
        Some(a) => out.matmul(a),
        None => Ok(out),
    }
}

/// `h` equally shaped `[l × d]` parts stacked into an `[h × l × d]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedTensor {
    depth: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl StackedTensor {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.depth, self.rows, self.cols)
    }

    pub fn part(&self, i: usize) -> DenseMatrix {
        let n = self.rows * self.cols;
        DenseMatrix::new(self.rows, self.cols, self.data[i * n..(i + 1) * n].to_vec())
            .expect("stored parts are valid")
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
}

/// Direct sum of equally shaped parts, realized as concatenation.
pub fn direct_sum(parts: &[DenseMatrix]) -> Result<StackedTensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("direct_sum needs at least one part".into()))?;
    if let Some(bad) = parts.iter().find(|p| p.shape() != first.shape()) {
        return Err(Error::shape("direct_sum", first.shape(), bad.shape()));
    }
    Ok(StackedTensor {
        depth: parts.len(),
        rows: first.rows(),
        cols: first.cols(),
        data: parts.iter().flat_map(|p| p.as_slice().iter().copied()).collect(),
    })
}

/// Per-block inputs and the final residual-stream state of one sequence.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub block_inputs: Vec<DenseMatrix>,
    /// Residual stream after the last block, before the final norm.
    pub final_states: DenseMatrix,
}

pub fn capture_trace(w: &ModelWeights, tokens: &[usize], cfg: &ModelConfig) -> Result<ActivationTrace> {
    cfg.check_tokens(tokens)?;
    let mut h = w.embedding.gather_rows(tokens);
    let mut block_inputs = Vec::with_capacity(w.blocks.len());
    for b in &w.blocks {
        let next = block_forward(b, &h, cfg)?;
        block_inputs.push(h);
        h = next;
    }
    Ok(ActivationTrace {
        block_inputs,
        final_states: h,
    })
}

/// Residual stream after the last block.
pub fn final_states(w: &ModelWeights, tokens: &[usize], cfg: &ModelConfig) -> Result<DenseMatrix> {
    cfg.check_tokens(tokens)?;
    let mut h = w.embedding.gather_rows(tokens);
    for b in &w.blocks {
        h = block_forward(b, &h, cfg)?;
    }
    Ok(h)
}

/// Next-token logits `[l × vocab_size]`.
pub fn model_forward(w: &ModelWeights, tokens: &[usize], cfg: &ModelConfig) -> Result<DenseMatrix> {
    let h = final_states(w, tokens, cfg)?;
    rmsnorm_rows(&h, &w.w_norm_final)?.matmul(&w.unembedding)
}
