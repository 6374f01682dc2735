//! Evaluation and analysis: normalized MSE, padding/compute accounting for
//! batch plans, and gradient cosine-similarity conflict statistics.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::masking::{build_attn_bias, mae_mask, AttnBias, MaskSpec};
use crate::model::{ModelBatch, ModelError, ToyMaeModel};
use crate::rng::{derive_stream, domain, CounterRng};
use crate::scheduler::{compute_jpad, BatchPlan, SamplePool, SchedulerError};
use crate::tensor::{ComplexTensor, TokenBank};

/// Histogram bin count over [-1, 1] for cosine statistics.
pub const COSINE_BINS: usize = 41;

#[derive(Debug)]
pub enum MetricsError {
    ShapeMismatch(String),
    ZeroNormTruth,
    LengthMismatch { a: usize, b: usize },
    ZeroNormGradient,
    UnknownSample(u64),
    NotEnoughBatches(usize),
    Scheduler(SchedulerError),
    Model(ModelError),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch(s) => write!(f, "shape mismatch: {s}"),
            Self::ZeroNormTruth => write!(f, "truth tensor has zero norm"),
            Self::LengthMismatch { a, b } => write!(f, "gradient lengths differ: {a} vs {b}"),
            Self::ZeroNormGradient => write!(f, "gradient has zero norm"),
            Self::UnknownSample(id) => write!(f, "no tokens banked for sample {id}"),
            Self::NotEnoughBatches(n) => {
                write!(f, "need at least 2 batches to sample pairs, plan has {n}")
            }
            Self::Scheduler(e) => write!(f, "{e}"),
            Self::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for MetricsError {}

impl From<SchedulerError> for MetricsError {
    fn from(e: SchedulerError) -> Self {
        Self::Scheduler(e)
    }
}

impl From<ModelError> for MetricsError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

impl From<crate::masking::MaskingError> for MetricsError {
    fn from(e: crate::masking::MaskingError) -> Self {
        Self::Model(ModelError::Masking(e))
    }
}

/// Normalized mean squared error of a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nmse {
    pub linear: f64,
    /// `10*log10(linear)`; negative infinity when the error is exactly zero.
    pub db: f64,
}

/// Renders a dB value for result files; exact zeros serialize as "-inf".
pub fn db_to_string(db: f64) -> String {
    if db == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{db:.6}")
    }
}

/// `||truth - pred||_F^2 / ||truth||_F^2`, linear and in dB.
pub fn nmse(truth: &ComplexTensor, pred: &ComplexTensor) -> Result<Nmse, MetricsError> {
    if truth.scale != pred.scale {
        return Err(MetricsError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            truth.scale, pred.scale
        )));
    }
    let den = truth.norm_sq();
    if den == 0.0 {
        return Err(MetricsError::ZeroNormTruth);
    }
    let mut num = 0.0;
    for i in 0..truth.re.len() {
        let dr = truth.re[i] - pred.re[i];
        let di = truth.im[i] - pred.im[i];
        num += dr * dr + di * di;
    }
    let linear = num / den;
    let db = if linear == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * linear.log10()
    };
    Ok(Nmse { linear, db })
}

/// Cosine similarity of two flat gradient vectors.
pub fn grad_cosine(g1: &[f64], g2: &[f64]) -> Result<f64, MetricsError> {
    if g1.len() != g2.len() {
        return Err(MetricsError::LengthMismatch {
            a: g1.len(),
            b: g2.len(),
        });
    }
    let n1: f64 = g1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2: f64 = g2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(MetricsError::ZeroNormGradient);
    }
    let dot: f64 = g1.iter().zip(g2.iter()).map(|(a, b)| a * b).sum();
    // Rounding can push |dot| a few ulps past the norm product.
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0))
}

/// Deterministic compute accounting for a batch plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanCost {
    /// Token operations: sum over batches of `batch_size * padded_len`.
    pub token_ops: u64,
    /// Valid (non-padding) token count.
    pub valid_tokens: u64,
    pub j_pad: u64,
    /// `j_pad / token_ops`.
    pub padding_ratio: f64,
}

/// Token-operation cost of a plan; `token_ops = valid_tokens + j_pad` exactly.
pub fn compute_cost(plan: &BatchPlan, pool: &SamplePool) -> Result<PlanCost, MetricsError> {
    let j_pad = compute_jpad(plan, pool)?;
    let token_ops: u64 = plan
        .batches
        .iter()
        .map(|b| (b.members.len() * b.padded_len) as u64)
        .sum();
    let valid_tokens = token_ops - j_pad;
    let padding_ratio = if token_ops > 0 {
        j_pad as f64 / token_ops as f64
    } else {
        0.0
    };
    Ok(PlanCost {
        token_ops,
        valid_tokens,
        j_pad,
        padding_ratio,
    })
}

/// Pairwise gradient-direction statistics for one batching regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictStats {
    pub cosines: Vec<f64>,
    pub fraction_negative: f64,
    /// Counts over [`COSINE_BINS`] uniform bins spanning [-1, 1].
    pub histogram: Vec<u32>,
}

impl ConflictStats {
    fn from_cosines(cosines: Vec<f64>) -> Self {
        let mut histogram = vec![0u32; COSINE_BINS];
        let mut negative = 0usize;
        for &c in &cosines {
            if c < 0.0 {
                negative += 1;
            }
            let bin = (((c + 1.0) / 2.0) * COSINE_BINS as f64).floor() as isize;
            let bin = bin.clamp(0, COSINE_BINS as isize - 1) as usize;
            histogram[bin] += 1;
        }
        let fraction_negative = if cosines.is_empty() {
            0.0
        } else {
            negative as f64 / cosines.len() as f64
        };
        ConflictStats {
            cosines,
            fraction_negative,
            histogram,
        }
    }
}

/// Settings for [`conflict_experiment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictConfig {
    pub n_pairs: usize,
    pub seed: u64,
    /// Random MAE mask ratio used when computing batch gradients.
    pub mask_ratio: f64,
    /// When false, padded tokens participate in attention as keys — the
    /// naive padded pipeline whose gradient pathology motivates scale-aware
    /// batching. When true, the double-masking path is active.
    pub isolate_padding: bool,
}

/// Full-parameter gradient of the masked reconstruction loss on one batch.
///
/// Each member's random mask draws from `(mask_seed, sample_id)`, so the
/// gradient is a pure function of (model, members, mask_seed, isolation).
pub fn batch_gradient(
    model: &ToyMaeModel,
    bank: &TokenBank,
    members: &[u64],
    mask_ratio: f64,
    mask_seed: u64,
    isolate_padding: bool,
) -> Result<Vec<f64>, MetricsError> {
    let mut seqs = Vec::with_capacity(members.len());
    for &id in members {
        let seq = bank.get(id).ok_or(MetricsError::UnknownSample(id))?;
        seqs.push((id, seq));
    }
    let mut masks = Vec::with_capacity(seqs.len());
    for (id, seq) in &seqs {
        masks.push(mae_mask(
            seq,
            &MaskSpec::Random { ratio: mask_ratio },
            derive_stream(&[domain::CONFLICT, mask_seed, *id]),
        )?);
    }
    let items: Vec<_> = seqs
        .iter()
        .zip(masks.iter())
        .map(|((_, seq), mask)| (*seq, mask))
        .collect();
    let batch = ModelBatch::assemble(&items, None)?;
    let bias = if isolate_padding {
        build_attn_bias(&batch.valid_lens, batch.len)?
    } else {
        AttnBias::open(batch.batch, batch.len)
    };
    let (_, grad) = model.loss_and_grad(&batch, &bias)?;
    if grad.iter().all(|&g| g == 0.0) {
        return Err(MetricsError::ZeroNormGradient);
    }
    Ok(grad)
}

fn plan_conflict_stats(
    model: &ToyMaeModel,
    bank: &TokenBank,
    plan: &BatchPlan,
    cfg: &ConflictConfig,
) -> Result<ConflictStats, MetricsError> {
    let n_batches = plan.batches.len();
    if n_batches < 2 {
        return Err(MetricsError::NotEnoughBatches(n_batches));
    }
    let mut rng = CounterRng::new(cfg.seed, derive_stream(&[domain::CONFLICT, 0]));
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    for _ in 0..cfg.n_pairs {
        let i = rng.next_below(n_batches as u64) as usize;
        let mut j = rng.next_below(n_batches as u64 - 1) as usize;
        if j >= i {
            j += 1;
        }
        pairs.push((i, j));
    }
    let mut grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(i, j) in &pairs {
        for idx in [i, j] {
            if let std::collections::btree_map::Entry::Vacant(slot) = grads.entry(idx) {
                slot.insert(batch_gradient(
                    model,
                    bank,
                    &plan.batches[idx].members,
                    cfg.mask_ratio,
                    derive_stream(&[cfg.seed, idx as u64]),
                    cfg.isolate_padding,
                )?);
            }
        }
    }
    let cosines = pairs
        .iter()
        .map(|&(i, j)| grad_cosine(&grads[&i], &grads[&j]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ConflictStats::from_cosines(cosines))
}

/// Compares gradient-pair alignment under two batching regimes at a fixed
/// parameter point. Returns `(stats_a, stats_b)`.
pub fn conflict_experiment(
    model: &ToyMaeModel,
    bank: &TokenBank,
    plan_a: &BatchPlan,
    plan_b: &BatchPlan,
    cfg: &ConflictConfig,
) -> Result<(ConflictStats, ConflictStats), MetricsError> {
    let a = plan_conflict_stats(model, bank, plan_a, cfg)?;
    let b = plan_conflict_stats(model, bank, plan_b, cfg)?;
    Ok((a, b))
}
