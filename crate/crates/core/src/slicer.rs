//! Representation-dimension slicing.
//!
//! The pipeline is fold → rotate → slice:
//!
//! 1. [`fold_norm_weights`] pushes every RMSNorm weight vector into the
//!    matrices that consume the normalized activations, leaving all-ones
//!    norms. RMSNorm without a weight commutes with orthogonal maps of the
//!    residual stream.
//! 2. [`compute_rotation`] runs calibration sequences through the model,
//!    forms the second moment of the residual-stream activations and takes
//!    its eigenvectors (principal directions, descending variance).
//!    [`apply_rotation`] re-expresses every weight in that basis; at this
//!    point the model computes exactly the same function.
//! 3. [`slice_model`] keeps the leading `(1 - s)·d` coordinates of the
//!    rotated residual stream.
//!
//! Only `d`-facing dimensions shrink. Attention width `h_attn·h_dim` and
//! MLP width `m` are left alone.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, SeededRng};
use crate::transformer::{capture_trace, rmsnorm_rows, Model, ModelWeights};

/// Orthogonality tolerance for rotations, per entry of `QQᵀ - I`.
pub const ORTHOGONALITY_TOL: f64 = 1e-10;

/// A validated sparsity `s` for a model of width `d`: `(1 - s)·d` is a
/// positive integer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityLevel {
    s: f64,
    d: usize,
    d_kept: usize,
}

impl SparsityLevel {
    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn d_kept(&self) -> usize {
        self.d_kept
    }

    pub fn is_identity(&self) -> bool {
        self.d_kept == self.d
    }
}

// Tolerance for floating-point representation of (1 - s)·d only; e.g.
// (1 - 0.3)·10 evaluates to 7.000000000000001.
const INTEGRALITY_TOL: f64 = 1e-9;

/// Check that `(1 - s)·d` is a positive integer. Never rounds silently:
/// a non-integral width is rejected and the two nearest admissible
/// sparsities are reported.
pub fn validate_sparsity(d: usize, s: f64) -> Result<SparsityLevel> {
    if !s.is_finite() || !(0.0..1.0).contains(&s) {
        return Err(Error::SparsityOutOfRange(s));
    }
    let kept = (1.0 - s) * d as f64;
    let nearest = kept.round();
    if (kept - nearest).abs() <= INTEGRALITY_TOL && nearest >= 1.0 {
        return Ok(SparsityLevel {
            s,
            d,
            d_kept: nearest as usize,
        });
    }
    let hi_kept = kept.ceil().min(d as f64);
    let lo_kept = kept.floor().max(1.0);
    let tidy = |x: f64| (x * 1e12).round() / 1e12;
    Err(Error::InadmissibleSparsity {
        d,
        s,
        kept,
        lower: tidy(1.0 - hi_kept / d as f64),
        upper: tidy(1.0 - lo_kept / d as f64),
    })
}

/// Scope of the calibration statistic behind each rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum RotationMode {
    /// One rotation from the pooled inputs of every block and of the final
    /// norm.
    #[default]
    #[serde(rename = "global")]
    Global,
    /// One rotation per block input plus one for the final residual stream,
    /// joined by residual adapters.
    #[serde(rename = "per-block")]
    PerBlock,
}

impl fmt::Display for RotationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RotationMode::Global => "global",
            RotationMode::PerBlock => "per-block",
        })
    }
}

impl FromStr for RotationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(RotationMode::Global),
            "per-block" => Ok(RotationMode::PerBlock),
            other => Err(Error::InvalidArgument(format!(
                "unknown rotation mode {other:?} (expected global or per-block)"
            ))),
        }
    }
}

/// Orthogonal rotations of the residual stream.
///
/// In global mode there is a single rotation. In per-block mode rotation
/// `i < n_blocks` is the basis of block `i`'s residual stream and the last
/// one is the basis of the final states fed to the unembedding.
#[derive(Debug, Clone)]
pub struct RotationPlan {
    pub mode: RotationMode,
    pub rotations: Vec<DenseMatrix>,
    /// Eigenvalues behind each rotation, descending. Empty for rotations
    /// supplied from outside.
    pub spectra: Vec<Vec<f64>>,
}

impl RotationPlan {
    pub fn global(q: DenseMatrix) -> Result<Self> {
        check_orthogonal(&q)?;
        Ok(Self {
            mode: RotationMode::Global,
            rotations: vec![q],
            spectra: vec![Vec::new()],
        })
    }

    pub fn per_block(qs: Vec<DenseMatrix>) -> Result<Self> {
        for q in &qs {
            check_orthogonal(q)?;
        }
        let spectra = vec![Vec::new(); qs.len()];
        Ok(Self {
            mode: RotationMode::PerBlock,
            rotations: qs,
            spectra,
        })
    }

    /// The inverse plan (every rotation transposed).
    pub fn inverse(&self) -> Self {
        Self {
            mode: self.mode,
            rotations: self.rotations.iter().map(DenseMatrix::transpose).collect(),
            spectra: vec![Vec::new(); self.rotations.len()],
        }
    }

    /// Fraction of eigenvalue mass captured by the leading `d_kept`
    /// directions of rotation `scope`.
    pub fn retained_mass(&self, scope: usize, d_kept: usize) -> f64 {
        let spec = &self.spectra[scope];
        let total: f64 = spec.iter().map(|v| v.max(0.0)).sum();
        if total == 0.0 {
            return 1.0;
        }
        spec.iter().take(d_kept).map(|v| v.max(0.0)).sum::<f64>() / total
    }

    fn rotation_for_block(&self, i: usize) -> &DenseMatrix {
        match self.mode {
            RotationMode::Global => &self.rotations[0],
            RotationMode::PerBlock => &self.rotations[i],
        }
    }

    fn final_rotation(&self) -> &DenseMatrix {
        self.rotations.last().expect("plan has at least one rotation")
    }
}

fn check_orthogonal(q: &DenseMatrix) -> Result<()> {
    if q.rows() != q.cols() {
        return Err(Error::InvalidMatrix(format!(
            "rotation must be square, got {}x{}",
            q.rows(),
            q.cols()
        )));
    }
    let err = linalg::orthogonality_error(q);
    if err > ORTHOGONALITY_TOL {
        return Err(Error::InvalidMatrix(format!(
            "rotation is not orthogonal: max |QQᵀ - I| = {err:e}"
        )));
    }
    Ok(())
}

/// True when every norm weight is exactly one.
pub fn norms_folded(w: &ModelWeights) -> bool {
    let ones = |v: &[f64]| v.iter().all(|&x| x == 1.0);
    ones(&w.w_norm_final)
        && w
            .blocks
            .iter()
            .all(|b| ones(&b.w_norm1) && ones(&b.w_norm2))
}

/// Absorb each norm weight vector into the rows of the matrices that read
/// the normalized activations, then reset the norms to ones.
pub fn fold_norm_weights(w: &ModelWeights) -> ModelWeights {
    let mut out = w.clone();
    for b in &mut out.blocks {
        b.w_q = b.w_q.scale_rows(&b.w_norm1);
        b.w_k = b.w_k.scale_rows(&b.w_norm1);
        b.w_v = b.w_v.scale_rows(&b.w_norm1);
        b.w_gate = b.w_gate.scale_rows(&b.w_norm2);
        b.w_up = b.w_up.scale_rows(&b.w_norm2);
        b.w_norm1.fill(1.0);
        b.w_norm2.fill(1.0);
    }
    out.unembedding = out.unembedding.scale_rows(&out.w_norm_final);
    out.w_norm_final.fill(1.0);
    out
}

fn eigen_rotation(stat: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
    let eig = linalg::symmetric_eig(stat)?;
    Ok((eig.eigenvectors, eig.eigenvalues))
}

/// Second moment of the rows of `x` after RMS normalization, which is
/// what every consumer of the residual stream reads. Without it the scope
/// with the largest activations (usually the deepest) swamps the rest.
fn normalized_second_moment(x: &DenseMatrix) -> Result<DenseMatrix> {
    let ones = vec![1.0; x.cols()];
    Ok(linalg::second_moment(&rmsnorm_rows(x, &ones)?))
}

/// Principal-direction rotations from calibration activations.
pub fn compute_rotation(model: &Model, calibration: &[Vec<usize>], mode: RotationMode) -> Result<RotationPlan> {
    if calibration.is_empty() {
        return Err(Error::InvalidArgument("calibration set is empty".into()));
    }
    if !norms_folded(&model.weights) {
        return Err(Error::NormsNotFolded);
    }
    let d = model.config.d;
    let n = model.config.n_blocks;
    let scopes = match mode {
        RotationMode::Global => 1,
        RotationMode::PerBlock => n + 1,
    };
    let mut stats = vec![DenseMatrix::zeros(d, d); scopes];
    for seq in calibration {
        let trace = capture_trace(&model.weights, seq, &model.config)?;
        match mode {
            RotationMode::Global => {
                for x in trace.block_inputs.iter().chain([&trace.final_states]) {
                    stats[0] = stats[0].add(&normalized_second_moment(x)?)?;
                }
            }
            RotationMode::PerBlock => {
                // block i works in basis i up to its adapter, so its output
                // (the next block's input) is expressed there too
                let mut moments = trace
                    .block_inputs
                    .iter()
                    .chain([&trace.final_states])
                    .map(normalized_second_moment)
                    .collect::<Result<Vec<_>>>()?;
                for i in 0..n {
                    stats[i] = stats[i].add(&moments[i])?.add(&moments[i + 1])?;
                }
                stats[n] = stats[n].add(&moments.pop().expect("final states"))?;
            }
        }
    }
    let mut rotations = Vec::with_capacity(scopes);
    let mut spectra = Vec::with_capacity(scopes);
    for s in &stats {
        let (q, spec) = eigen_rotation(s)?;
        rotations.push(q);
        spectra.push(spec);
    }
    Ok(RotationPlan {
        mode,
        rotations,
        spectra,
    })
}

/// Re-express every weight in the plan's residual basis.
///
/// Embedding `→ E·Q`, input-side matrices `W → QᵀW`, output-side matrices
/// `W → W·Q`, unembedding `→ QᵀU`. In per-block mode each block's output
/// is carried into the next block's basis by the adapter `Q_iᵀ·Q_{i+1}`.
pub fn apply_rotation(model: &Model, plan: &RotationPlan) -> Result<Model> {
    if !norms_folded(&model.weights) {
        return Err(Error::NormsNotFolded);
    }
    let d = model.config.d;
    let n = model.config.n_blocks;
    let expected = match plan.mode {
        RotationMode::Global => 1,
        RotationMode::PerBlock => n + 1,
    };
    if plan.rotations.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "{} plan needs {expected} rotations, got {}",
            plan.mode,
            plan.rotations.len()
        )));
    }
    if let Some(q) = plan.rotations.iter().find(|q| q.shape() != (d, d)) {
        return Err(Error::shape("apply_rotation", q.shape(), (d, d)));
    }

    let w = &model.weights;
    let mut out = w.clone();
    out.embedding = w.embedding.matmul(plan.rotation_for_block(0))?;
    for (i, (src, dst)) in w.blocks.iter().zip(out.blocks.iter_mut()).enumerate() {
        let q = plan.rotation_for_block(i);
        let qt = q.transpose();
        dst.w_q = qt.matmul(&src.w_q)?;
        dst.w_k = qt.matmul(&src.w_k)?;
        dst.w_v = qt.matmul(&src.w_v)?;
        dst.w_gate = qt.matmul(&src.w_gate)?;
        dst.w_up = qt.matmul(&src.w_up)?;
        dst.w_o = src.w_o.matmul(q)?;
        dst.w_down = src.w_down.matmul(q)?;
        let q_next = if i + 1 < n {
            plan.rotation_for_block(i + 1)
        } else {
            plan.final_rotation()
        };
        dst.residual_adapter = match (&src.residual_adapter, plan.mode) {
            (Some(a), _) => Some(qt.matmul(a)?.matmul(q_next)?),
            (None, RotationMode::PerBlock) => Some(qt.matmul(q_next)?),
            (None, RotationMode::Global) => None,
        };
    }
    out.unembedding = plan.final_rotation().transpose().matmul(&w.unembedding)?;
    Model::new(model.config.clone(), out)
}

/// A model with a reduced residual width.
#[derive(Debug, Clone)]
pub struct SlicedModel {
    pub model: Model,
    pub level: SparsityLevel,
    pub mode: RotationMode,
}

/// Keep the leading `d_kept` coordinates of a folded, rotated model.
///
/// Input-side matrices keep their first `d_kept` rows, output-side
/// matrices their first `d_kept` columns. RMSNorm averages over the
/// width it sees, so the rows feeding from a norm are also scaled by
/// `√(d / d_kept)`: a row whose energy lies in the kept coordinates then
/// normalizes to the same values as before slicing.
pub fn slice_model(model: &Model, plan: &RotationPlan, level: SparsityLevel) -> Result<SlicedModel> {
    if !norms_folded(&model.weights) {
        return Err(Error::NormsNotFolded);
    }
    let d = model.config.d;
    if level.d() != d {
        return Err(Error::InvalidArgument(format!(
            "sparsity level was validated for d={}, model has d={d}",
            level.d()
        )));
    }
    if level.is_identity() {
        return Ok(SlicedModel {
            model: model.clone(),
            level,
            mode: plan.mode,
        });
    }
    let k = level.d_kept();
    let gain = (d as f64 / k as f64).sqrt();
    let rows_in = |m: &DenseMatrix| m.row_block(0, k).scale(gain);
    let cols_out = |m: &DenseMatrix| m.column_block(0, k);

    let w = &model.weights;
    let blocks = w
        .blocks
        .iter()
        .map(|b| {
            let mut nb = b.clone();
            nb.w_norm1 = vec![1.0; k];
            nb.w_norm2 = vec![1.0; k];
            nb.w_q = rows_in(&b.w_q);
            nb.w_k = rows_in(&b.w_k);
            nb.w_v = rows_in(&b.w_v);
            nb.w_gate = rows_in(&b.w_gate);
            nb.w_up = rows_in(&b.w_up);
            nb.w_o = cols_out(&b.w_o);
            nb.w_down = cols_out(&b.w_down);
            nb.residual_adapter = b
                .residual_adapter
                .as_ref()
                .map(|a| a.row_block(0, k).column_block(0, k));
            nb
        })
        .collect();
    let weights = ModelWeights {
        embedding: cols_out(&w.embedding),
        blocks,
        w_norm_final: vec![1.0; k],
        unembedding: rows_in(&w.unembedding),
    };
    let mut config = model.config.clone();
    config.d = k;
    Ok(SlicedModel {
        model: Model::new(config, weights)?,
        level,
        mode: plan.mode,
    })
}

/// fold → compute rotation → rotate → slice.
pub fn slice_pipeline(
    model: &Model,
    calibration: &[Vec<usize>],
    mode: RotationMode,
    level: SparsityLevel,
) -> Result<(SlicedModel, RotationPlan)> {
    let folded = Model::new(model.config.clone(), fold_norm_weights(&model.weights))?;
    let plan = compute_rotation(&folded, calibration, mode)?;
    let rotated = apply_rotation(&folded, &plan)?;
    Ok((slice_model(&rotated, &plan, level)?, plan))
}

/// `count` random windows of `len` tokens from `tokens`, seeded.
pub fn calibration_windows(tokens: &[usize], count: usize, len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 || tokens.len() < len {
        return Err(Error::InvalidArgument(format!(
            "calibration needs windows of {len} tokens from a stream of {}",
            tokens.len()
        )));
    }
    let mut rng = SeededRng::new(seed);
    Ok((0..count)
        .map(|_| {
            let start = rng.below(tokens.len() - len + 1);
            tokens[start..start + len].to_vec()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::ModelConfig;

    fn toy(d: usize, blocks: usize, seed: u64) -> Model {
        let heads = if d >= 4 { 4 } else { 1 };
        let cfg = ModelConfig::new(d, 2 * d, heads, d / heads, heads / heads.min(2), blocks, 13, 8).unwrap();
        let mut m = Model::init(cfg, seed);
        let mut rng = SeededRng::new(seed ^ 0xabc);
        for (_, s) in m.weights.named_slices_mut() {
            s.iter_mut().for_each(|v| *v = *v * 15.0 + 0.05 * rng.normal());
        }
        m
    }

    fn rel_dev(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        a.max_abs_diff(b) / b.max_abs().max(1e-300)
    }

    #[test]
    fn sparsity_validation() {
        let l = validate_sparsity(16, 0.25).unwrap();
        assert_eq!(l.d_kept(), 12);
        assert_eq!(validate_sparsity(4096, 0.5).unwrap().d_kept(), 2048);
        assert_eq!(validate_sparsity(10, 0.3).unwrap().d_kept(), 7);
        match validate_sparsity(10, 0.33) {
            Err(Error::InadmissibleSparsity { lower, upper, .. }) => {
                assert_eq!(lower, 0.3);
                assert_eq!(upper, 0.4);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(validate_sparsity(8, 1.0), Err(Error::SparsityOutOfRange(_))));
        assert!(matches!(validate_sparsity(8, -0.1), Err(Error::SparsityOutOfRange(_))));
        assert!(validate_sparsity(8, f64::NAN).is_err());
        assert!(validate_sparsity(8, 0.0).unwrap().is_identity());
    }

    #[test]
    fn folding_preserves_logits_and_is_idempotent() {
        let m = toy(8, 2, 1);
        let folded = Model::new(m.config.clone(), fold_norm_weights(&m.weights)).unwrap();
        assert!(norms_folded(&folded.weights));
        let t = [1, 4, 2, 8, 5];
        assert!(rel_dev(&folded.forward(&t).unwrap(), &m.forward(&t).unwrap()) < 1e-10);
        assert_eq!(fold_norm_weights(&folded.weights), folded.weights);

        let plain = Model::init(m.config.clone(), 3);
        assert_eq!(fold_norm_weights(&plain.weights), plain.weights);
    }

    #[test]
    fn rotation_preserves_logits() {
        let m = toy(16, 2, 2);
        let folded = Model::new(m.config.clone(), fold_norm_weights(&m.weights)).unwrap();
        let q = linalg::random_orthogonal(16, &mut SeededRng::new(5));
        let plan = RotationPlan::global(q).unwrap();
        let rotated = apply_rotation(&folded, &plan).unwrap();
        let t = [3, 1, 4, 1, 5];
        assert!(rel_dev(&rotated.forward(&t).unwrap(), &m.forward(&t).unwrap()) < 1e-8);

        let back = apply_rotation(&rotated, &plan.inverse()).unwrap();
        for ((_, a), (_, b)) in back.weights.named_tensors().iter().zip(folded.weights.named_tensors().iter()) {
            let dev = a.data.iter().zip(b.data).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(dev < 1e-10);
        }

        let id = RotationPlan::global(DenseMatrix::identity(16)).unwrap();
        assert_eq!(apply_rotation(&folded, &id).unwrap(), folded);
    }

    #[test]
    fn per_block_rotation_preserves_logits() {
        let m = toy(8, 3, 3);
        let folded = Model::new(m.config.clone(), fold_norm_weights(&m.weights)).unwrap();
        let mut rng = SeededRng::new(6);
        let qs = (0..4).map(|_| linalg::random_orthogonal(8, &mut rng)).collect();
        let plan = RotationPlan::per_block(qs).unwrap();
        let rotated = apply_rotation(&folded, &plan).unwrap();
        assert!(rotated.weights.blocks.iter().all(|b| b.residual_adapter.is_some()));
        let t = [0, 12, 7, 7];
        assert!(rel_dev(&rotated.forward(&t).unwrap(), &m.forward(&t).unwrap()) < 1e-8);
    }

    #[test]
    fn rotation_rejects_bad_input() {
        let m = toy(8, 1, 4);
        assert!(matches!(
            compute_rotation(&m, &[vec![1, 2]], RotationMode::Global),
            Err(Error::NormsNotFolded)
        ));
        let folded = Model::new(m.config.clone(), fold_norm_weights(&m.weights)).unwrap();
        assert!(compute_rotation(&folded, &[], RotationMode::Global).is_err());
        let plan = RotationPlan::global(DenseMatrix::identity(4)).unwrap();
        assert!(apply_rotation(&folded, &plan).is_err());
        assert!(RotationPlan::global(DenseMatrix::filled(3, 3, 1.0)).is_err());
    }

    #[test]
    fn computed_rotation_is_orthogonal_with_sorted_spectrum() {
        let m = toy(8, 2, 7);
        let folded = Model::new(m.config.clone(), fold_norm_weights(&m.weights)).unwrap();
        let calib = vec![vec![1, 2, 3, 4, 5, 6], vec![7, 8, 9, 10, 11, 12]];
        for mode in [RotationMode::Global, RotationMode::PerBlock] {
            let plan = compute_rotation(&folded, &calib, mode).unwrap();
            for (q, spec) in plan.rotations.iter().zip(&plan.spectra) {
                assert!(linalg::orthogonality_error(q) < 1e-10);
                assert!(spec.windows(2).all(|w| w[0] >= w[1]));
            }
            let masses: Vec<f64> = (1..=8).map(|k| plan.retained_mass(0, k)).collect();
            assert!(masses.windows(2).all(|w| w[0] <= w[1]));
            assert!((masses[7] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn slicing_shapes() {
        let m = toy(16, 2, 8);
        let folded = Model::new(m.config.clone(), fold_norm_weights(&m.weights)).unwrap();
        let plan = RotationPlan::global(DenseMatrix::identity(16)).unwrap();
        let s0 = slice_model(&folded, &plan, validate_sparsity(16, 0.0).unwrap()).unwrap();
        assert_eq!(s0.model, folded);

        let sl = slice_model(&folded, &plan, validate_sparsity(16, 0.25).unwrap()).unwrap();
        let (w, ow) = (&sl.model.weights, &folded.weights);
        assert_eq!(sl.model.config.d, 12);
        assert_eq!(sl.model.config.attn_width(), 16);
        assert_eq!(w.embedding.cols() + 4, ow.embedding.cols());
        assert_eq!(w.unembedding.rows() + 4, ow.unembedding.rows());
        for (b, ob) in w.blocks.iter().zip(&ow.blocks) {
            for (x, y) in [(&b.w_q, &ob.w_q), (&b.w_k, &ob.w_k), (&b.w_v, &ob.w_v), (&b.w_gate, &ob.w_gate), (&b.w_up, &ob.w_up)] {
                assert_eq!((x.rows() + 4, x.cols()), y.shape());
            }
            for (x, y) in [(&b.w_o, &ob.w_o), (&b.w_down, &ob.w_down)] {
                assert_eq!((x.rows(), x.cols() + 4), y.shape());
            }
            assert_eq!(b.w_norm1.len(), 12);
        }
        assert!(norms_folded(w));
        sl.model.forward(&[1, 2, 3]).unwrap();
    }

    #[test]
    fn slicing_requires_folded_norms() {
        let m = toy(8, 1, 9);
        let plan = RotationPlan::global(DenseMatrix::identity(8)).unwrap();
        assert!(slice_model(&m, &plan, validate_sparsity(8, 0.5).unwrap()).is_err());
    }

    #[test]
    fn calibration_windows_are_seeded() {
        let tokens: Vec<usize> = (0..100).collect();
        let a = calibration_windows(&tokens, 8, 10, 1).unwrap();
        assert_eq!(a, calibration_windows(&tokens, 8, 10, 1).unwrap());
        assert!(a.iter().all(|w| w.len() == 10 && w.windows(2).all(|p| p[1] == p[0] + 1)));
        assert!(calibration_windows(&tokens, 8, 101, 1).is_err());
    }
}
